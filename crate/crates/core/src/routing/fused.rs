//! Routing as a single tape operation.
//!
//! Same arithmetic as [`super::route`], but each sample is routed and
//! back-propagated on its own slice of `u_hat`, so the working set stays in
//! cache and no intermediate tensor of prediction size is materialized. The
//! backward pass replays the unrolled iterations by hand.

use std::ops::Range;

use super::{Grouping, RoutingConfig, RoutingOutput};
use crate::capsule_ops::{squash_factor, squash_slope_over_norm, AxisMode, CapsError, CapsLayerSpec, PredictionTensor};
use crate::tensor::Tensor;

struct Layout {
    n: usize,
    j: usize,
    d: usize,
    r: usize,
    axis: AxisMode,
    /// Lower-index ranges summed into one `s`; a single full range when ungrouped.
    sum_groups: Vec<Range<usize>>,
    /// Lower-index ranges normalized together under `LowerPerUpper`.
    norm_groups: Vec<Range<usize>>,
    grouped: bool,
}

/// Values of one iteration for one sample.
struct Saved {
    /// `[n, j]`
    c: Vec<f64>,
    /// `[groups, j, d]`
    s: Vec<f64>,
    /// `sum_m squash(s_m)`, `[j, d]` (grouped only)
    w: Vec<f64>,
    /// `[j, d]`
    v: Vec<f64>,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn squash_into(s: &[f64], out: &mut [f64]) {
    let f = squash_factor(norm(s));
    out.iter_mut().zip(s).for_each(|(o, x)| *o = f * x);
}

/// Adds the squash vector-Jacobian product at `s` applied to `g` into `out`.
fn squash_vjp(s: &[f64], g: &[f64], out: &mut [f64]) {
    let r = norm(s);
    let (f, h) = (squash_factor(r), squash_slope_over_norm(r));
    let sg = dot(s, g);
    for k in 0..s.len() {
        out[k] += f * g[k] + h * sg * s[k];
    }
}

impl Layout {
    fn softmax(&self, b: &[f64], c: &mut [f64]) {
        let (n, j) = (self.n, self.j);
        match self.axis {
            AxisMode::UpperPerLower => {
                for i in 0..n {
                    let row = &b[i * j..(i + 1) * j];
                    let peak = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let out = &mut c[i * j..(i + 1) * j];
                    let mut total = 0.0;
                    for (o, &x) in out.iter_mut().zip(row) {
                        *o = (x - peak).exp();
                        total += *o;
                    }
                    out.iter_mut().for_each(|o| *o /= total);
                }
            }
            AxisMode::LowerPerUpper => {
                for group in &self.norm_groups {
                    for jj in 0..j {
                        let peak = group.clone().map(|i| b[i * j + jj]).fold(f64::NEG_INFINITY, f64::max);
                        let mut total = 0.0;
                        for i in group.clone() {
                            let e = (b[i * j + jj] - peak).exp();
                            c[i * j + jj] = e;
                            total += e;
                        }
                        for i in group.clone() {
                            c[i * j + jj] /= total;
                        }
                    }
                }
            }
        }
    }

    /// Adds `c * (gc - sum_group(c * gc))` into `gb`.
    fn softmax_vjp(&self, c: &[f64], gc: &[f64], gb: &mut [f64]) {
        let (n, j) = (self.n, self.j);
        match self.axis {
            AxisMode::UpperPerLower => {
                for i in 0..n {
                    let at = i * j..(i + 1) * j;
                    let inner = dot(&c[at.clone()], &gc[at.clone()]);
                    for k in at {
                        gb[k] += c[k] * (gc[k] - inner);
                    }
                }
            }
            AxisMode::LowerPerUpper => {
                for group in &self.norm_groups {
                    for jj in 0..j {
                        let inner: f64 = group.clone().map(|i| c[i * j + jj] * gc[i * j + jj]).sum();
                        for i in group.clone() {
                            let k = i * j + jj;
                            gb[k] += c[k] * (gc[k] - inner);
                        }
                    }
                }
            }
        }
    }

    /// Routes one sample; `u` is its `[j, n, d]` slice of the predictions.
    fn forward(&self, u: &[f64]) -> Vec<Saved> {
        let (n, j, d) = (self.n, self.j, self.d);
        let groups = self.sum_groups.len();
        let pred = |jj: usize, i: usize| &u[(jj * n + i) * d..(jj * n + i + 1) * d];
        let mut b = vec![0.0; n * j];
        let mut saved = Vec::with_capacity(self.r);
        for t in 0..self.r {
            let mut c = vec![0.0; n * j];
            self.softmax(&b, &mut c);
            let mut s = vec![0.0; groups * j * d];
            for (m, group) in self.sum_groups.iter().enumerate() {
                for jj in 0..j {
                    let acc = &mut s[(m * j + jj) * d..(m * j + jj + 1) * d];
                    for i in group.clone() {
                        let weight = c[i * j + jj];
                        acc.iter_mut().zip(pred(jj, i)).for_each(|(a, x)| *a += weight * x);
                    }
                }
            }
            let mut v = vec![0.0; j * d];
            let mut w = Vec::new();
            if self.grouped {
                w = vec![0.0; j * d];
                let mut vm = vec![0.0; d];
                for m in 0..groups {
                    for jj in 0..j {
                        squash_into(&s[(m * j + jj) * d..(m * j + jj + 1) * d], &mut vm);
                        w[jj * d..(jj + 1) * d].iter_mut().zip(&vm).for_each(|(a, x)| *a += x);
                    }
                }
                for jj in 0..j {
                    squash_into(&w[jj * d..(jj + 1) * d], &mut v[jj * d..(jj + 1) * d]);
                }
            } else {
                for jj in 0..j {
                    squash_into(&s[jj * d..(jj + 1) * d], &mut v[jj * d..(jj + 1) * d]);
                }
            }
            if t + 1 < self.r {
                for jj in 0..j {
                    let vj = &v[jj * d..(jj + 1) * d];
                    for i in 0..n {
                        b[i * j + jj] += dot(pred(jj, i), vj);
                    }
                }
            }
            saved.push(Saved { c, s, w, v });
        }
        saved
    }

    /// Gradient with respect to this sample's predictions, given the gradient
    /// `gv` of the final output, accumulated into `gu`.
    fn backward(&self, u: &[f64], saved: &[Saved], gv: &[f64], gu: &mut [f64]) {
        let (n, j, d) = (self.n, self.j, self.d);
        let groups = self.sum_groups.len();
        let at = |jj: usize, i: usize| (jj * n + i) * d..(jj * n + i + 1) * d;
        // gradient of the logits entering the iteration after the current one
        let mut gb = vec![0.0; n * j];
        for t in (0..self.r).rev() {
            let it = &saved[t];
            let mut gvt = if t + 1 == self.r { gv.to_vec() } else { vec![0.0; j * d] };
            if t + 1 < self.r {
                for jj in 0..j {
                    let vj = &it.v[jj * d..(jj + 1) * d];
                    for i in 0..n {
                        let g = gb[i * j + jj];
                        let (pred, grad) = (&u[at(jj, i)], &mut gu[at(jj, i)]);
                        for k in 0..d {
                            gvt[jj * d + k] += g * pred[k];
                            grad[k] += g * vj[k];
                        }
                    }
                }
            }
            let mut gs = vec![0.0; groups * j * d];
            if self.grouped {
                let mut gw = vec![0.0; d];
                for jj in 0..j {
                    gw.iter_mut().for_each(|x| *x = 0.0);
                    squash_vjp(&it.w[jj * d..(jj + 1) * d], &gvt[jj * d..(jj + 1) * d], &mut gw);
                    for m in 0..groups {
                        let range = (m * j + jj) * d..(m * j + jj + 1) * d;
                        squash_vjp(&it.s[range.clone()], &gw, &mut gs[range]);
                    }
                }
            } else {
                for jj in 0..j {
                    let range = jj * d..(jj + 1) * d;
                    squash_vjp(&it.s[range.clone()], &gvt[range.clone()], &mut gs[range]);
                }
            }
            let mut gc = vec![0.0; n * j];
            for (m, group) in self.sum_groups.iter().enumerate() {
                for jj in 0..j {
                    let g = &gs[(m * j + jj) * d..(m * j + jj + 1) * d];
                    for i in group.clone() {
                        let weight = it.c[i * j + jj];
                        gc[i * j + jj] = dot(g, &u[at(jj, i)]);
                        gu[at(jj, i)].iter_mut().zip(g).for_each(|(a, x)| *a += weight * x);
                    }
                }
            }
            self.softmax_vjp(&it.c, &gc, &mut gb);
        }
    }
}

/// [`super::route`] fused into one tape node. Only `v` carries gradients;
/// the per-type outputs are returned as detached constants and no trace is
/// captured.
pub fn route_fused<'t>(
    u_hat: &PredictionTensor<'t>,
    spec: &CapsLayerSpec,
    config: &RoutingConfig,
) -> Result<RoutingOutput<'t>, CapsError> {
    if config.iterations == 0 {
        return Err(CapsError::NoIterations);
    }
    spec.validate()?;
    u_hat.check_spec(spec)?;
    let input = u_hat.upper_major();
    let values = input.value();
    if !values.all_finite() {
        return Err(CapsError::NonFinite { op: "route" });
    }
    let partition = spec.partition()?;
    let (batch, n, j, d) = u_hat.dims();
    let grouped = config.grouping == Grouping::ByType;
    let all = vec![0..n];
    let layout = Layout {
        n,
        j,
        d,
        r: config.iterations,
        axis: config.softmax_axis,
        sum_groups: if grouped { partition.groups().collect() } else { all.clone() },
        norm_groups: if grouped { partition.groups().collect() } else { all },
        grouped,
    };

    let block = j * n * d;
    let saved: Vec<Vec<Saved>> = values.data().chunks(block).map(|u| layout.forward(u)).collect();
    let mut v = Tensor::zeros(&[batch, j, d]);
    v.data_mut()
        .chunks_mut(j * d)
        .zip(&saved)
        .for_each(|(out, s)| out.copy_from_slice(&s[layout.r - 1].v));
    let per_type = grouped.then(|| {
        let types = layout.sum_groups.len();
        let mut t = Tensor::zeros(&[batch, types, j, d]);
        for (out, s) in t.data_mut().chunks_mut(types * j * d).zip(&saved) {
            for (o, x) in out.chunks_mut(d).zip(s[layout.r - 1].s.chunks(d)) {
                squash_into(x, o);
            }
        }
        input.tape().constant(t)
    });

    let backward = Box::new(move |g: &Tensor, _: &[bool]| {
        let mut gu = Tensor::zeros(values.shape());
        gu.data_mut()
            .chunks_mut(block)
            .zip(values.data().chunks(block))
            .zip(g.data().chunks(j * d))
            .zip(&saved)
            .for_each(|(((gu, u), gv), s)| layout.backward(u, s, gv, gu));
        vec![Some(gu)]
    });
    Ok(RoutingOutput {
        v: input.tape().record(&[input], v, backward),
        per_type,
        trace: None,
    })
}
