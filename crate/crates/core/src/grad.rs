//! Layer-wise reverse-mode differentiation of the softmax cross-entropy loss.
//!
//! The architecture family is fixed, so every backward rule is written out by
//! hand instead of going through a general tape. Hessian-vector products use
//! the forward-over-reverse R-operator: a directional forward sweep followed
//! by a backward sweep that carries both the gradient and its directional
//! derivative.

use rayon::prelude::*;

use crate::dataset::Example;
use crate::error::{Result, TicError};
use crate::nn::{check_input, forward_cached, softmax, ForwardCache, NetworkSpec, ParamVector};

/// Gradient of the loss with respect to every parameter, in the layout of
/// the associated [`ParamVector`].
pub type GradVector = Vec<f64>;

/// `K x d` Jacobian of the logits with respect to the parameters, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputJacobian {
    pub num_outputs: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl OutputJacobian {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.values[k * self.dim + j]
    }
}

/// Back-propagates `seed` (the derivative with respect to the logits) and
/// writes the parameter gradient into `out`.
pub(crate) fn backward(
    spec: &NetworkSpec,
    params: &ParamVector,
    cache: &ForwardCache,
    seed: &[f64],
    out: &mut [f64],
) {
    let layout = params.layout();
    let mut upstream = seed.to_vec();
    for l in (0..spec.num_layers()).rev() {
        let seg = layout[l];
        let input = &cache.inputs[l];
        let dz: Vec<f64> = if spec.is_hidden(l) {
            upstream
                .iter()
                .zip(&cache.pre[l])
                .map(|(&g, &z)| g * spec.activation.derivative(z))
                .collect()
        } else {
            upstream.clone()
        };
        let w_out = &mut out[seg.weight_range()];
        for (r, &d) in dz.iter().enumerate() {
            let row = &mut w_out[r * seg.fan_in..(r + 1) * seg.fan_in];
            for (slot, &h) in row.iter_mut().zip(input) {
                *slot = d * h;
            }
        }
        out[seg.bias_range()].copy_from_slice(&dz);
        if l > 0 {
            let mut down = if spec.has_residual(l) {
                upstream.clone()
            } else {
                vec![0.0; seg.fan_in]
            };
            transpose_mul_add(params.weights(l), &dz, seg.fan_in, &mut down);
            upstream = down;
        }
    }
}

/// `acc += W^T v` for row-major `W` with `fan_in` columns.
#[inline]
fn transpose_mul_add(w: &[f64], v: &[f64], fan_in: usize, acc: &mut [f64]) {
    for (r, &vr) in v.iter().enumerate() {
        if vr == 0.0 {
            continue;
        }
        let row = &w[r * fan_in..(r + 1) * fan_in];
        for (a, &wv) in acc.iter_mut().zip(row) {
            *a += wv * vr;
        }
    }
}

/// Softmax minus one-hot: the loss derivative with respect to the logits.
pub(crate) fn logit_residual(logits: &[f64], label: usize) -> Vec<f64> {
    let mut p = softmax(logits);
    p[label] -= 1.0;
    p
}

fn check_label(spec: &NetworkSpec, label: usize) -> Result<()> {
    if label >= spec.num_classes {
        return Err(TicError::LabelOutOfRange {
            label,
            num_classes: spec.num_classes,
        });
    }
    Ok(())
}

/// Gradient of `loss(forward(x), label)` with respect to all parameters.
pub fn grad(spec: &NetworkSpec, params: &ParamVector, x: &[f64], label: usize) -> Result<GradVector> {
    check_input(spec, params, x)?;
    check_label(spec, label)?;
    let cache = forward_cached(spec, params, x);
    let seed = logit_residual(cache.logits(), label);
    let mut out = vec![0.0; params.len()];
    backward(spec, params, &cache, &seed, &mut out);
    Ok(out)
}

/// Loss value and gradient for one example.
pub fn loss_and_grad(
    spec: &NetworkSpec,
    params: &ParamVector,
    x: &[f64],
    label: usize,
) -> Result<(f64, GradVector)> {
    check_input(spec, params, x)?;
    check_label(spec, label)?;
    let cache = forward_cached(spec, params, x);
    let value = crate::nn::loss(cache.logits(), label)?;
    let seed = logit_residual(cache.logits(), label);
    let mut out = vec![0.0; params.len()];
    backward(spec, params, &cache, &seed, &mut out);
    Ok((value, out))
}

/// Gradients for every example in `batch`, in batch order.
pub fn per_sample_grads(
    spec: &NetworkSpec,
    params: &ParamVector,
    batch: &[Example<'_>],
) -> Result<Vec<GradVector>> {
    if batch.is_empty() {
        return Err(TicError::Empty("batch"));
    }
    batch
        .par_iter()
        .map(|ex| grad(spec, params, ex.x, ex.label))
        .collect()
}

/// Mean loss and gradient of the batch-mean loss. Contributions are summed in
/// batch order.
pub fn batch_loss_and_grad(
    spec: &NetworkSpec,
    params: &ParamVector,
    batch: &[Example<'_>],
) -> Result<(f64, GradVector)> {
    if batch.is_empty() {
        return Err(TicError::Empty("batch"));
    }
    let parts: Vec<(f64, GradVector)> = batch
        .par_iter()
        .map(|ex| loss_and_grad(spec, params, ex.x, ex.label))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut acc = vec![0.0; params.len()];
    for (value, g) in parts {
        total += value;
        for (a, gi) in acc.iter_mut().zip(g) {
            *a += gi;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok((total * inv, acc))
}

/// Jacobian of the logits at `x`, one reverse pass per logit.
pub fn output_jacobian(spec: &NetworkSpec, params: &ParamVector, x: &[f64]) -> Result<OutputJacobian> {
    check_input(spec, params, x)?;
    let cache = forward_cached(spec, params, x);
    Ok(jacobian_from_cache(spec, params, &cache))
}

pub(crate) fn jacobian_from_cache(spec: &NetworkSpec, params: &ParamVector, cache: &ForwardCache) -> OutputJacobian {
    let k = spec.num_classes;
    let d = params.len();
    let mut values = vec![0.0; k * d];
    let mut seed = vec![0.0; k];
    for (row, chunk) in values.chunks_mut(d).enumerate() {
        seed.iter_mut().for_each(|s| *s = 0.0);
        seed[row] = 1.0;
        backward(spec, params, cache, &seed, chunk);
    }
    OutputJacobian {
        num_outputs: k,
        dim: d,
        values,
    }
}

/// Directional derivative of the forward pass: the logit tangent `J v` and
/// the tangent of every layer input.
fn tangent_forward(
    spec: &NetworkSpec,
    params: &ParamVector,
    cache: &ForwardCache,
    v: &[f64],
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let layout = params.layout();
    let mut input_tangents = Vec::with_capacity(spec.num_layers());
    let mut rh = vec![0.0; spec.input_dim];
    let mut rz = Vec::new();
    for l in 0..spec.num_layers() {
        let seg = layout[l];
        let h = &cache.inputs[l];
        let vw = &v[seg.weight_range()];
        let vb = &v[seg.bias_range()];
        let w = params.weights(l);
        rz = (0..seg.fan_out)
            .map(|r| {
                let wrow = &w[r * seg.fan_in..(r + 1) * seg.fan_in];
                let vrow = &vw[r * seg.fan_in..(r + 1) * seg.fan_in];
                let mut acc = vb[r];
                for c in 0..seg.fan_in {
                    acc += vrow[c] * h[c] + wrow[c] * rh[c];
                }
                acc
            })
            .collect();
        if spec.is_hidden(l) {
            let mut next: Vec<f64> = rz
                .iter()
                .zip(&cache.pre[l])
                .map(|(&t, &z)| t * spec.activation.derivative(z))
                .collect();
            if spec.has_residual(l) {
                for (n, &prev) in next.iter_mut().zip(&rh) {
                    *n += prev;
                }
            }
            input_tangents.push(std::mem::replace(&mut rh, next));
        } else {
            input_tangents.push(std::mem::take(&mut rh));
        }
    }
    (input_tangents, rz)
}

/// `(diag(p) - p p^T) u`: the softmax cross-entropy Hessian with respect to
/// the logits applied to `u`.
pub(crate) fn logit_hessian_mul(p: &[f64], u: &[f64]) -> Vec<f64> {
    let pu: f64 = p.iter().zip(u).map(|(a, b)| a * b).sum();
    p.iter().zip(u).map(|(&pk, &uk)| pk * (uk - pu)).collect()
}

/// Exact Hessian-vector product of one example's loss, accumulated into `out`.
fn hvp_single(spec: &NetworkSpec, params: &ParamVector, ex: &Example<'_>, v: &[f64], out: &mut [f64]) {
    let cache = forward_cached(spec, params, ex.x);
    let (input_tangents, r_logits) = tangent_forward(spec, params, &cache, v);
    let p = softmax(cache.logits());
    let mut g = p.clone();
    g[ex.label] -= 1.0;
    let mut rg = logit_hessian_mul(&p, &r_logits);

    let layout = params.layout();
    for l in (0..spec.num_layers()).rev() {
        let seg = layout[l];
        let h = &cache.inputs[l];
        let rh = &input_tangents[l];
        let (dz, rdz): (Vec<f64>, Vec<f64>) = if spec.is_hidden(l) {
            // Second derivatives of identity and ReLU vanish, so the tangent
            // of dz only picks up the tangent of the upstream gradient.
            g.iter()
                .zip(&rg)
                .zip(&cache.pre[l])
                .map(|((&gi, &rgi), &z)| {
                    let a = spec.activation.derivative(z);
                    (gi * a, rgi * a)
                })
                .unzip()
        } else {
            (g.clone(), rg.clone())
        };
        {
            let hw = &mut out[seg.weight_range()];
            for r in 0..seg.fan_out {
                let row = &mut hw[r * seg.fan_in..(r + 1) * seg.fan_in];
                for c in 0..seg.fan_in {
                    row[c] += rdz[r] * h[c] + dz[r] * rh[c];
                }
            }
        }
        for (o, &val) in out[seg.bias_range()].iter_mut().zip(&rdz) {
            *o += val;
        }
        if l > 0 {
            let residual = spec.has_residual(l);
            let mut down = if residual { g.clone() } else { vec![0.0; seg.fan_in] };
            let mut rdown = if residual { rg.clone() } else { vec![0.0; seg.fan_in] };
            transpose_mul_add(params.weights(l), &dz, seg.fan_in, &mut down);
            transpose_mul_add(params.weights(l), &rdz, seg.fan_in, &mut rdown);
            transpose_mul_add(&v[seg.weight_range()], &dz, seg.fan_in, &mut rdown);
            g = down;
            rg = rdown;
        }
    }
}

fn check_direction(params: &ParamVector, v: &[f64]) -> Result<()> {
    if v.len() != params.len() {
        return Err(TicError::DimensionMismatch {
            what: "direction vector",
            expected: params.len(),
            actual: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(TicError::InvalidArgument("direction vector must be finite".into()));
    }
    Ok(())
}

fn check_batch(spec: &NetworkSpec, params: &ParamVector, batch: &[Example<'_>]) -> Result<()> {
    if batch.is_empty() {
        return Err(TicError::Empty("batch"));
    }
    for ex in batch {
        check_input(spec, params, ex.x)?;
        check_label(spec, ex.label)?;
    }
    Ok(())
}

/// Hessian of the batch-mean loss applied to `v`, by forward-over-reverse
/// differentiation. Costs a small constant multiple of one gradient.
///
/// This is the full Hessian. For networks with more than one layer it
/// differs from the Gauss-Newton product [`ggn_vp`] off the diagonal by the
/// logit-residual-weighted curvature of the network function, while the
/// diagonals agree for identity/ReLU networks (each parameter enters every
/// logit at most linearly).
pub fn hvp(spec: &NetworkSpec, params: &ParamVector, batch: &[Example<'_>], v: &[f64]) -> Result<Vec<f64>> {
    check_batch(spec, params, batch)?;
    check_direction(params, v)?;
    let d = params.len();
    let parts: Vec<Vec<f64>> = batch
        .par_iter()
        .map(|ex| {
            let mut out = vec![0.0; d];
            hvp_single(spec, params, ex, v, &mut out);
            out
        })
        .collect();
    Ok(mean_of(parts, d))
}

/// Generalized Gauss-Newton matrix applied to `v`: `mean_i J_i^T H_f J_i v`.
pub fn ggn_vp(spec: &NetworkSpec, params: &ParamVector, batch: &[Example<'_>], v: &[f64]) -> Result<Vec<f64>> {
    check_batch(spec, params, batch)?;
    check_direction(params, v)?;
    let d = params.len();
    let parts: Vec<Vec<f64>> = batch
        .par_iter()
        .map(|ex| {
            let cache = forward_cached(spec, params, ex.x);
            let (_, jv) = tangent_forward(spec, params, &cache, v);
            let p = softmax(cache.logits());
            let seed = logit_hessian_mul(&p, &jv);
            let mut out = vec![0.0; d];
            backward(spec, params, &cache, &seed, &mut out);
            out
        })
        .collect();
    Ok(mean_of(parts, d))
}

fn mean_of(parts: Vec<Vec<f64>>, d: usize) -> Vec<f64> {
    let n = parts.len() as f64;
    let mut acc = vec![0.0; d];
    for part in parts {
        for (a, p) in acc.iter_mut().zip(part) {
            *a += p;
        }
    }
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}
