//! Capsule-level primitives: squash, prediction vectors, coupling
//! coefficients, agreement updates, and the margin / reconstruction losses.
//!
//! Layout conventions (batch first):
//! - lower-layer capsules `u`: `[batch, num_lower, dim_lower]`
//! - predictions `u_hat`: `[batch, num_lower, num_upper, dim_upper]`
//! - logits `b` and couplings `c`: `[batch, num_lower, num_upper]`
//! - upper-layer capsules `s`, `v`: `[batch, num_upper, dim_upper]`

use std::ops::Range;

use thiserror::Error;

use crate::tensor::{gemm, Tensor, TensorError, Var};

/// Guard added to the norm when forming `s / |s|`.
pub const SQUASH_EPSILON: f64 = 1e-9;

pub const MARGIN_POSITIVE: f64 = 0.9;
pub const MARGIN_NEGATIVE: f64 = 0.1;
pub const MARGIN_DOWNWEIGHT: f64 = 0.5;
/// Weight of the reconstruction term in the total training loss.
pub const RECONSTRUCTION_SCALE: f64 = 0.0005;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CapsError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid capsule layer: {0}")]
    InvalidSpec(String),
    #[error("type partition {num_groups} x {group_size} does not cover exactly 0..{num_lower}")]
    Partition {
        num_groups: usize,
        group_size: usize,
        num_lower: usize,
    },
    #[error("{op}: expected shape {expected:?}, got {actual:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{op}: input contains non-finite values")]
    NonFinite { op: &'static str },
    #[error("labels are not one-hot (row {row})")]
    NotOneHot { row: usize },
    #[error("lower-capsule subset {start}..{end} exceeds {num_lower} capsules")]
    SubsetOutOfRange { start: usize, end: usize, num_lower: usize },
    #[error("routing needs at least one iteration")]
    NoIterations,
    #[error("rate-of-change report needs a trace of at least 2 iterations, got {0}")]
    TraceTooShort(usize),
}

/// Shape metadata for a pair of capsule layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CapsLayerSpec {
    pub num_lower: usize,
    pub num_upper: usize,
    pub dim_lower: usize,
    pub dim_upper: usize,
    pub num_types: usize,
    pub caps_per_type: usize,
}

impl CapsLayerSpec {
    pub fn new(
        num_lower: usize,
        num_upper: usize,
        dim_lower: usize,
        dim_upper: usize,
        num_types: usize,
        caps_per_type: usize,
    ) -> Result<Self, CapsError> {
        let spec = CapsLayerSpec {
            num_lower,
            num_upper,
            dim_lower,
            dim_upper,
            num_types,
            caps_per_type,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A layer without type structure: one group holding every lower capsule.
    pub fn ungrouped(num_lower: usize, num_upper: usize, dim_lower: usize, dim_upper: usize) -> Result<Self, CapsError> {
        Self::new(num_lower, num_upper, dim_lower, dim_upper, 1, num_lower)
    }

    /// PrimaryCaps -> DigitCaps on 28x28 inputs: 32 types on a 6x6 grid, 10 classes.
    pub fn reference() -> Self {
        CapsLayerSpec {
            num_lower: 1152,
            num_upper: 10,
            dim_lower: 8,
            dim_upper: 16,
            num_types: 32,
            caps_per_type: 36,
        }
    }

    pub fn validate(&self) -> Result<(), CapsError> {
        let fields = [
            self.num_lower,
            self.num_upper,
            self.dim_lower,
            self.dim_upper,
            self.num_types,
            self.caps_per_type,
        ];
        if fields.contains(&0) {
            return Err(CapsError::InvalidSpec(format!("all sizes must be positive: {self:?}")));
        }
        self.partition().map(|_| ())
    }

    pub fn partition(&self) -> Result<TypePartition, CapsError> {
        TypePartition::new(self.num_types, self.caps_per_type, self.num_lower)
    }
}

/// Split of the lower-capsule index into contiguous, equally sized type
/// groups `[t * group_size, (t + 1) * group_size)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TypePartition {
    num_groups: usize,
    group_size: usize,
}

impl TypePartition {
    pub fn new(num_groups: usize, group_size: usize, num_lower: usize) -> Result<Self, CapsError> {
        if num_groups == 0 || group_size == 0 || num_groups * group_size != num_lower {
            return Err(CapsError::Partition {
                num_groups,
                group_size,
                num_lower,
            });
        }
        Ok(TypePartition { num_groups, group_size })
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn num_lower(&self) -> usize {
        self.num_groups * self.group_size
    }

    pub fn group(&self, t: usize) -> Range<usize> {
        t * self.group_size..(t + 1) * self.group_size
    }

    pub fn groups(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        (0..self.num_groups).map(|t| self.group(t))
    }
}

/// Which index the routing softmax normalizes over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AxisMode {
    /// For each lower capsule, over the upper capsules (`sum_j c_ij = 1`).
    UpperPerLower,
    /// For each upper capsule, over the lower capsules (`sum_i c_ij = 1`).
    LowerPerUpper,
}

/// Prediction vectors `u_hat[j|i]`.
///
/// Stored upper-major (`[batch, num_upper, num_lower, dim_upper]`) because the
/// weighted sum and the agreement step are both batched matrix products in
/// that layout.
#[derive(Clone, Copy, Debug)]
pub struct PredictionTensor<'t> {
    by_upper: Var<'t>,
}

impl<'t> PredictionTensor<'t> {
    /// Wraps `u_hat` given as `[batch, num_lower, num_upper, dim_upper]`.
    pub fn new(u_hat: Var<'t>) -> Result<Self, CapsError> {
        let shape = u_hat.shape();
        if shape.len() != 4 {
            return Err(CapsError::Shape {
                op: "prediction",
                expected: vec![0, 0, 0, 0],
                actual: shape,
            });
        }
        Ok(PredictionTensor {
            by_upper: u_hat.permute(&[0, 2, 1, 3])?,
        })
    }

    pub fn from_upper_major(by_upper: Var<'t>) -> Self {
        PredictionTensor { by_upper }
    }

    /// `[batch, num_lower, num_upper, dim_upper]`
    pub fn u_hat(&self) -> Result<Var<'t>, CapsError> {
        Ok(self.by_upper.permute(&[0, 2, 1, 3])?)
    }

    /// `[batch, num_upper, num_lower, dim_upper]`
    pub fn upper_major(&self) -> Var<'t> {
        self.by_upper
    }

    /// `(batch, num_lower, num_upper, dim_upper)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.by_upper.shape();
        (s[0], s[2], s[1], s[3])
    }

    pub fn check_spec(&self, spec: &CapsLayerSpec) -> Result<(), CapsError> {
        let (batch, n, j, d) = self.dims();
        if (n, j, d) != (spec.num_lower, spec.num_upper, spec.dim_upper) {
            return Err(CapsError::Shape {
                op: "prediction",
                expected: vec![batch, spec.num_lower, spec.num_upper, spec.dim_upper],
                actual: vec![batch, n, j, d],
            });
        }
        Ok(())
    }
}

/// Routing logits `b_ij`, `[batch, num_lower, num_upper]`.
#[derive(Clone, Copy, Debug)]
pub struct LogitMatrix<'t>(pub Var<'t>);

impl<'t> LogitMatrix<'t> {
    /// All-zero logits, the state at the start of routing.
    pub fn zeros(tape: &'t crate::tensor::Tape, batch: usize, num_lower: usize, num_upper: usize) -> Self {
        LogitMatrix(tape.constant(Tensor::zeros(&[batch, num_lower, num_upper])))
    }
}

/// Coupling coefficients `c_ij` and the axis they were normalized over.
#[derive(Clone, Copy, Debug)]
pub struct CouplingMatrix<'t> {
    pub c: Var<'t>,
    pub axis_mode: AxisMode,
}

/// Scale applied to `s` by squash: `r^2 / ((1 + r^2)(r + eps))` for `r = |s|`.
pub(crate) fn squash_factor(r: f64) -> f64 {
    r * r / ((1.0 + r * r) * (r + SQUASH_EPSILON))
}

/// `squash_factor'(r) / r`, finite at `r = 0`.
pub(crate) fn squash_slope_over_norm(r: f64) -> f64 {
    let denom = 1.0 + r * r;
    2.0 / (denom * (r + SQUASH_EPSILON))
        - 2.0 * squash_factor(r) / denom
        - r / (denom * (r + SQUASH_EPSILON) * (r + SQUASH_EPSILON))
}

/// `v = |s|^2 / (1 + |s|^2) * s / (|s| + eps)` along `axis`.
pub fn squash<'t>(s: Var<'t>, axis: isize) -> Result<Var<'t>, CapsError> {
    let x = s.value();
    if !x.all_finite() {
        return Err(CapsError::NonFinite { op: "squash" });
    }
    let axis = crate::tensor::resolve_axis("squash", axis, x.shape())?;
    let outer: usize = x.shape()[..axis].iter().product();
    let n = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let mut norms = vec![0.0; outer * inner];
    for o in 0..outer {
        for k in 0..n {
            for i in 0..inner {
                let v = x.data()[(o * n + k) * inner + i];
                norms[o * inner + i] += v * v;
            }
        }
    }
    norms.iter_mut().for_each(|r| *r = r.sqrt());

    let mut out = (*x).clone();
    {
        let od = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let f = squash_factor(norms[o * inner + i]);
                for k in 0..n {
                    od[(o * n + k) * inner + i] *= f;
                }
            }
        }
    }
    let backward = Box::new(move |g: &Tensor, _: &[bool]| {
        let (xd, gd) = (x.data(), g.data());
        let mut gx = Tensor::zeros(x.shape());
        let gxd = gx.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let r = norms[o * inner + i];
                let f = squash_factor(r);
                let h = squash_slope_over_norm(r);
                let at = |k: usize| (o * n + k) * inner + i;
                let dot: f64 = (0..n).map(|k| xd[at(k)] * gd[at(k)]).sum();
                for k in 0..n {
                    gxd[at(k)] = f * gd[at(k)] + h * dot * xd[at(k)];
                }
            }
        }
        vec![Some(gx)]
    });
    Ok(s.tape().record(&[s], out, backward))
}

/// `u_hat[b, i, j] = W[i, j] u[b, i]` with `u: [batch, num_lower, dim_lower]`
/// and `W: [num_lower, num_upper, dim_upper, dim_lower]`.
pub fn predict<'t>(u: Var<'t>, weights: Var<'t>) -> Result<PredictionTensor<'t>, CapsError> {
    let (us, ws) = (u.shape(), weights.shape());
    if us.len() != 3 || ws.len() != 4 || us[1] != ws[0] || us[2] != ws[3] {
        return Err(CapsError::Shape {
            op: "predict",
            expected: vec![us.first().copied().unwrap_or(0), ws.first().copied().unwrap_or(0), ws.get(3).copied().unwrap_or(0)],
            actual: us,
        });
    }
    let (batch, n, d_in) = (us[0], us[1], us[2]);
    let (j, d_out) = (ws[1], ws[2]);
    let (uv, wv) = (u.value(), weights.value());
    // One product per lower capsule i gives û[:, :, i, :] as a [batch, j * d_out]
    // panel, which is scattered into the upper-major layout (and gathered
    // back out of it for the gradients).
    let panel = j * d_out;
    let u_rs = (n * d_in) as isize;
    let at_u = move |i: usize| i * d_in;
    let at_w = move |i: usize| i * panel * d_in;
    let scatter = move |buf: &[f64], out: &mut [f64], i: usize| {
        for (b, row) in buf.chunks_exact(panel).enumerate() {
            for (jj, piece) in row.chunks_exact(d_out).enumerate() {
                let at = ((b * j + jj) * n + i) * d_out;
                out[at..at + d_out].copy_from_slice(piece);
            }
        }
    };
    let gather = move |src: &[f64], buf: &mut [f64], i: usize| {
        for (b, row) in buf.chunks_exact_mut(panel).enumerate() {
            for (jj, piece) in row.chunks_exact_mut(d_out).enumerate() {
                let at = ((b * j + jj) * n + i) * d_out;
                piece.copy_from_slice(&src[at..at + d_out]);
            }
        }
    };

    let mut out = Tensor::zeros(&[batch, j, n, d_out]);
    {
        let od = out.data_mut();
        let mut buf = vec![0.0; batch * panel];
        for i in 0..n {
            gemm(
                batch,
                d_in,
                panel,
                (&uv.data()[at_u(i)..], u_rs, 1),
                (&wv.data()[at_w(i)..], 1, d_in as isize),
                0.0,
                (&mut buf, panel as isize),
            );
            scatter(&buf, od, i);
        }
    }
    let backward = Box::new(move |g: &Tensor, needs: &[bool]| {
        let mut gu = needs[0].then(|| Tensor::zeros(uv.shape()));
        let mut gw = needs[1].then(|| Tensor::zeros(wv.shape()));
        let mut buf = vec![0.0; batch * panel];
        for i in 0..n {
            gather(g.data(), &mut buf, i);
            if let Some(gu) = gu.as_mut() {
                gemm(
                    batch,
                    panel,
                    d_in,
                    (&buf, panel as isize, 1),
                    (&wv.data()[at_w(i)..], d_in as isize, 1),
                    0.0,
                    (&mut gu.data_mut()[at_u(i)..], u_rs),
                );
            }
            if let Some(gw) = gw.as_mut() {
                gemm(
                    panel,
                    batch,
                    d_in,
                    (&buf, 1, panel as isize),
                    (&uv.data()[at_u(i)..], u_rs, 1),
                    0.0,
                    (&mut gw.data_mut()[at_w(i)..], d_in as isize),
                );
            }
        }
        vec![gu, gw]
    });
    Ok(PredictionTensor::from_upper_major(u.tape().record(&[u, weights], out, backward)))
}

/// Softmax of the logits along the configured axis. With a partition and
/// [`AxisMode::LowerPerUpper`], each type group is normalized on its own.
pub fn coupling_from_logits<'t>(
    b: &LogitMatrix<'t>,
    axis_mode: AxisMode,
    partition: Option<&TypePartition>,
) -> Result<CouplingMatrix<'t>, CapsError> {
    let shape = b.0.shape();
    if shape.len() != 3 {
        return Err(CapsError::Shape {
            op: "coupling",
            expected: vec![0, 0, 0],
            actual: shape,
        });
    }
    let (batch, n, j) = (shape[0], shape[1], shape[2]);
    if let Some(p) = partition {
        if p.num_lower() != n {
            return Err(CapsError::Partition {
                num_groups: p.num_groups(),
                group_size: p.group_size(),
                num_lower: n,
            });
        }
    }
    let c = match (axis_mode, partition) {
        (AxisMode::UpperPerLower, _) => b.0.softmax(2)?,
        (AxisMode::LowerPerUpper, None) => b.0.softmax(1)?,
        (AxisMode::LowerPerUpper, Some(p)) => b
            .0
            .reshape(&[batch, p.num_groups(), p.group_size(), j])?
            .softmax(2)?
            .reshape(&[batch, n, j])?,
    };
    Ok(CouplingMatrix { c, axis_mode })
}

fn check_coupling_matches(c: &CouplingMatrix, u_hat: &PredictionTensor, op: &'static str) -> Result<(), CapsError> {
    let (batch, n, j, _) = u_hat.dims();
    let cs = c.c.shape();
    if cs != [batch, n, j] {
        return Err(CapsError::Shape {
            op,
            expected: vec![batch, n, j],
            actual: cs,
        });
    }
    Ok(())
}

/// `s_j = sum_i c_ij u_hat[j|i]`, optionally over a contiguous subset of the
/// lower capsules. Returns `[batch, num_upper, dim_upper]`.
pub fn weighted_sum<'t>(
    c: &CouplingMatrix<'t>,
    u_hat: &PredictionTensor<'t>,
    subset: Option<Range<usize>>,
) -> Result<Var<'t>, CapsError> {
    check_coupling_matches(c, u_hat, "weighted_sum")?;
    let (batch, n, j, d) = u_hat.dims();
    let range = subset.unwrap_or(0..n);
    if range.start >= range.end || range.end > n {
        return Err(CapsError::SubsetOutOfRange {
            start: range.start,
            end: range.end,
            num_lower: n,
        });
    }
    let len = range.len();
    let mut coeffs = c.c.permute(&[0, 2, 1])?; // [batch, j, n]
    let mut votes = u_hat.upper_major();
    if len != n {
        coeffs = coeffs.narrow(2, range.start, len)?;
        votes = votes.narrow(2, range.start, len)?;
    }
    let s = coeffs.reshape(&[batch, j, 1, len])?.matmul(votes)?;
    Ok(s.reshape(&[batch, j, d])?)
}

/// Per-type weighted sums `s_jm = sum_{i in m} c_ij u_hat[j|i]`, returned as
/// `[batch, num_types, num_upper, dim_upper]`.
pub fn weighted_sum_by_type<'t>(
    c: &CouplingMatrix<'t>,
    u_hat: &PredictionTensor<'t>,
    partition: &TypePartition,
) -> Result<Var<'t>, CapsError> {
    check_coupling_matches(c, u_hat, "weighted_sum_by_type")?;
    let (batch, n, j, d) = u_hat.dims();
    if partition.num_lower() != n {
        return Err(CapsError::Partition {
            num_groups: partition.num_groups(),
            group_size: partition.group_size(),
            num_lower: n,
        });
    }
    let (t, k) = (partition.num_groups(), partition.group_size());
    let coeffs = c.c.permute(&[0, 2, 1])?.reshape(&[batch, j, t, 1, k])?;
    let votes = u_hat.upper_major().reshape(&[batch, j, t, k, d])?;
    let s = coeffs.matmul(votes)?.reshape(&[batch, j, t, d])?;
    Ok(s.permute(&[0, 2, 1, 3])?)
}

/// `b_ij + <u_hat[j|i], v_j>` for every lower capsule `i`.
pub fn agreement_update<'t>(
    b: &LogitMatrix<'t>,
    u_hat: &PredictionTensor<'t>,
    v: Var<'t>,
) -> Result<LogitMatrix<'t>, CapsError> {
    let (batch, n, j, d) = u_hat.dims();
    let (bs, vs) = (b.0.shape(), v.shape());
    if bs != [batch, n, j] {
        return Err(CapsError::Shape {
            op: "agreement_update",
            expected: vec![batch, n, j],
            actual: bs,
        });
    }
    if vs != [batch, j, d] {
        return Err(CapsError::Shape {
            op: "agreement_update",
            expected: vec![batch, j, d],
            actual: vs,
        });
    }
    let dots = u_hat
        .upper_major()
        .matmul(v.reshape(&[batch, j, d, 1])?)?
        .reshape(&[batch, j, n])?
        .permute(&[0, 2, 1])?;
    Ok(LogitMatrix(b.0.add(dots)?))
}

/// Verifies that `labels` is a `[batch, classes]` one-hot matrix.
pub fn check_one_hot(labels: &Tensor) -> Result<(), CapsError> {
    if labels.rank() != 2 {
        return Err(CapsError::NotOneHot { row: 0 });
    }
    let classes = labels.shape()[1];
    for (row, chunk) in labels.data().chunks(classes).enumerate() {
        let ones = chunk.iter().filter(|&&x| x == 1.0).count();
        let zeros = chunk.iter().filter(|&&x| x == 0.0).count();
        if ones != 1 || ones + zeros != classes {
            return Err(CapsError::NotOneHot { row });
        }
    }
    Ok(())
}

/// Margin loss on capsule lengths `[batch, classes]`, averaged over the batch.
pub fn margin_loss<'t>(lengths: Var<'t>, labels: &Tensor) -> Result<Var<'t>, CapsError> {
    check_one_hot(labels)?;
    if lengths.shape() != labels.shape() {
        return Err(CapsError::Shape {
            op: "margin_loss",
            expected: labels.shape().to_vec(),
            actual: lengths.shape(),
        });
    }
    let tape = lengths.tape();
    let present = tape.constant(labels.clone());
    let absent = tape.constant(labels.map(|t| MARGIN_DOWNWEIGHT * (1.0 - t)));
    let below = lengths.scale(-1.0).add_scalar(MARGIN_POSITIVE).relu().square();
    let above = lengths.add_scalar(-MARGIN_NEGATIVE).relu().square();
    let per_class = present.mul(below)?.add(absent.mul(above)?)?;
    Ok(per_class.sum(1, false)?.mean_all())
}

/// Sum of squared pixel errors per image, averaged over the batch.
pub fn reconstruction_loss<'t>(decoded: Var<'t>, target: Var<'t>) -> Result<Var<'t>, CapsError> {
    let (ds, ts) = (decoded.shape(), target.shape());
    if ds != ts || ds.len() != 2 {
        return Err(CapsError::Shape {
            op: "reconstruction_loss",
            expected: ts,
            actual: ds,
        });
    }
    Ok(decoded.sub(target)?.square().sum(1, false)?.mean_all())
}
