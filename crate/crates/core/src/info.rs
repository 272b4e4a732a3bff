//! Curvature and gradient-noise matrices: the generalized Gauss-Newton
//! matrix, exact and Monte Carlo Fisher, the uncentered gradient covariance,
//! and the empirical NTK Gram matrix.
//!
//! Every constructor accumulates per-example rank-one terms `u v^T` into the
//! requested representation. Entries are accumulated in the same order for
//! the dense, block and diagonal layouts, so the block and diagonal outputs
//! are bit-for-bit sub-parts of the dense output. Examples are processed in
//! parallel chunks but reduced sequentially in batch order, so results do
//! not depend on the number of worker threads.

use std::io::{Read, Write};
use std::ops::Range;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::error::{Result, TicError};
use crate::grad::{backward, batch_loss_and_grad, grad, jacobian_from_cache, logit_residual, OutputJacobian};
use crate::linalg::{BlockDiagMatrix, DenseSymMatrix, DiagVector};
use crate::nn::{check_input, forward_cached, softmax, NetworkSpec, ParamVector};

/// Default bound on `d` for dense and block assembly (about 200 MB dense).
pub const DEFAULT_DENSE_CAP: usize = 5000;

/// Bound on `m * K` for NTK Gram matrices.
pub const NTK_SIZE_CAP: usize = 2000;

const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Dense,
    Block,
    Diag,
}

impl Representation {
    pub fn tag(self) -> u32 {
        match self {
            Representation::Dense => 0,
            Representation::Block => 1,
            Representation::Diag => 2,
        }
    }
}

/// Representation plus the dense-size cap it is checked against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assembly {
    pub representation: Representation,
    pub dense_cap: usize,
}

impl Assembly {
    pub fn new(representation: Representation) -> Self {
        Assembly {
            representation,
            dense_cap: DEFAULT_DENSE_CAP,
        }
    }

    pub fn with_cap(mut self, cap: usize) -> Self {
        self.dense_cap = cap;
        self
    }
}

impl From<Representation> for Assembly {
    fn from(representation: Representation) -> Self {
        Assembly::new(representation)
    }
}

/// An assembled matrix in one of the three representations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InfoMatrix {
    Dense(DenseSymMatrix),
    Block(BlockDiagMatrix),
    Diag(DiagVector),
}

impl InfoMatrix {
    pub fn representation(&self) -> Representation {
        match self {
            InfoMatrix::Dense(_) => Representation::Dense,
            InfoMatrix::Block(_) => Representation::Block,
            InfoMatrix::Diag(_) => Representation::Diag,
        }
    }

    pub fn trace(&self) -> f64 {
        match self {
            InfoMatrix::Dense(m) => m.trace(),
            InfoMatrix::Block(m) => m.trace(),
            InfoMatrix::Diag(m) => m.trace(),
        }
    }

    pub fn diagonal(&self) -> DiagVector {
        match self {
            InfoMatrix::Dense(m) => m.diagonal(),
            InfoMatrix::Block(m) => m.diagonal(),
            InfoMatrix::Diag(m) => m.clone(),
        }
    }

    pub fn into_dense(self) -> Option<DenseSymMatrix> {
        match self {
            InfoMatrix::Dense(m) => Some(m),
            _ => None,
        }
    }

    pub fn into_block(self) -> Option<BlockDiagMatrix> {
        match self {
            InfoMatrix::Block(m) => Some(m),
            _ => None,
        }
    }

    pub fn into_diag(self) -> Option<DiagVector> {
        match self {
            InfoMatrix::Diag(m) => Some(m),
            _ => None,
        }
    }
}

/// One example's contribution: `scale * sum_r u_r v_r^T`.
struct Terms {
    pairs: Vec<(Vec<f64>, Vec<f64>)>,
}

struct Accumulator {
    representation: Representation,
    dim: usize,
    blocks: Vec<Range<usize>>,
    data: Vec<f64>,
}

impl Accumulator {
    fn new(representation: Representation, params: &ParamVector) -> Self {
        let dim = params.len();
        let blocks: Vec<Range<usize>> = params.layout().iter().map(|s| s.range()).collect();
        let size = match representation {
            Representation::Dense => dim * dim,
            Representation::Block => blocks.iter().map(|r| r.len() * r.len()).sum(),
            Representation::Diag => dim,
        };
        Accumulator {
            representation,
            dim,
            blocks,
            data: vec![0.0; size],
        }
    }

    fn add(&mut self, terms: &Terms) {
        match self.representation {
            Representation::Dense => {
                let d = self.dim;
                for (u, v) in &terms.pairs {
                    for a in 0..d {
                        let ua = u[a];
                        if ua == 0.0 {
                            continue;
                        }
                        let row = &mut self.data[a * d..(a + 1) * d];
                        for (slot, &vb) in row.iter_mut().zip(v.iter()) {
                            *slot += ua * vb;
                        }
                    }
                }
            }
            Representation::Block => {
                let mut offset = 0;
                for range in &self.blocks {
                    let len = range.len();
                    for (u, v) in &terms.pairs {
                        for (i, a) in range.clone().enumerate() {
                            let ua = u[a];
                            if ua == 0.0 {
                                continue;
                            }
                            let row = &mut self.data[offset + i * len..offset + (i + 1) * len];
                            for (slot, &vb) in row.iter_mut().zip(&v[range.clone()]) {
                                *slot += ua * vb;
                            }
                        }
                    }
                    offset += len * len;
                }
            }
            Representation::Diag => {
                for (u, v) in &terms.pairs {
                    for a in 0..self.dim {
                        let ua = u[a];
                        if ua == 0.0 {
                            continue;
                        }
                        self.data[a] += ua * v[a];
                    }
                }
            }
        }
    }

    fn finish(mut self, scale: f64) -> InfoMatrix {
        self.data.iter_mut().for_each(|v| *v *= scale);
        match self.representation {
            Representation::Dense => {
                let mut m = DenseSymMatrix::from_row_major(self.dim, self.data).expect("sized");
                m.symmetrize();
                InfoMatrix::Dense(m)
            }
            Representation::Block => {
                let mut offset = 0;
                let mut blocks = Vec::with_capacity(self.blocks.len());
                for range in &self.blocks {
                    let len = range.len();
                    let vals = self.data[offset..offset + len * len].to_vec();
                    blocks.push(DenseSymMatrix::from_row_major(len, vals).expect("sized"));
                    offset += len * len;
                }
                InfoMatrix::Block(BlockDiagMatrix::new(blocks))
            }
            Representation::Diag => InfoMatrix::Diag(DiagVector::new(self.data)),
        }
    }
}

fn validate(
    spec: &NetworkSpec,
    params: &ParamVector,
    batch: &[Example<'_>],
    assembly: Assembly,
) -> Result<()> {
    if batch.is_empty() {
        return Err(TicError::Empty("batch"));
    }
    if matches!(assembly.representation, Representation::Dense | Representation::Block)
        && params.len() > assembly.dense_cap
    {
        return Err(TicError::CapExceeded {
            dim: params.len(),
            cap: assembly.dense_cap,
        });
    }
    for ex in batch {
        check_input(spec, params, ex.x)?;
        if ex.label >= spec.num_classes {
            return Err(TicError::LabelOutOfRange {
                label: ex.label,
                num_classes: spec.num_classes,
            });
        }
    }
    Ok(())
}

/// Computes per-example terms in parallel chunks and reduces them in order.
fn assemble<F>(params: &ParamVector, count: usize, representation: Representation, scale: f64, terms_for: F) -> InfoMatrix
where
    F: Fn(usize) -> Terms + Sync,
{
    let mut acc = Accumulator::new(representation, params);
    let mut start = 0;
    while start < count {
        let end = (start + CHUNK).min(count);
        let chunk: Vec<Terms> = (start..end).into_par_iter().map(&terms_for).collect();
        for terms in &chunk {
            acc.add(terms);
        }
        start = end;
    }
    acc.finish(scale)
}

/// Generalized Gauss-Newton matrix `(1/n) sum_i J_i^T (diag(p_i) - p_i p_i^T) J_i`.
pub fn ggn(
    spec: &NetworkSpec,
    params: &ParamVector,
    batch: &[Example<'_>],
    assembly: impl Into<Assembly>,
) -> Result<InfoMatrix> {
    let assembly = assembly.into();
    validate(spec, params, batch, assembly)?;
    let d = params.len();
    Ok(assemble(
        params,
        batch.len(),
        assembly.representation,
        1.0 / batch.len() as f64,
        |i| {
            let cache = forward_cached(spec, params, batch[i].x);
            let p = softmax(cache.logits());
            let jac = jacobian_from_cache(spec, params, &cache);
            // (diag(p) - p p^T) J: row k is p_k (J_k - sum_l p_l J_l).
            let mut mean_row = vec![0.0; d];
            for (k, &pk) in p.iter().enumerate() {
                for (m, &j) in mean_row.iter_mut().zip(jac.row(k)) {
                    *m += pk * j;
                }
            }
            let pairs = (0..spec.num_classes)
                .map(|k| {
                    let jk = jac.row(k).to_vec();
                    let mk: Vec<f64> = jk.iter().zip(&mean_row).map(|(a, b)| p[k] * (a - b)).collect();
                    (jk, mk)
                })
                .collect();
            Terms { pairs }
        },
    ))
}

/// Exact Fisher: `(1/n) sum_i sum_y p_i[y] g_{i,y} g_{i,y}^T` with `g_{i,y}`
/// the loss gradient at label `y`.
pub fn fisher_exact(
    spec: &NetworkSpec,
    params: &ParamVector,
    batch: &[Example<'_>],
    assembly: impl Into<Assembly>,
) -> Result<InfoMatrix> {
    let assembly = assembly.into();
    validate(spec, params, batch, assembly)?;
    let d = params.len();
    Ok(assemble(
        params,
        batch.len(),
        assembly.representation,
        1.0 / batch.len() as f64,
        |i| {
            let cache = forward_cached(spec, params, batch[i].x);
            let p = softmax(cache.logits());
            let pairs = (0..spec.num_classes)
                .map(|y| {
                    let mut g = vec![0.0; d];
                    backward(spec, params, &cache, &logit_residual(cache.logits(), y), &mut g);
                    let weighted: Vec<f64> = g.iter().map(|v| p[y] * v).collect();
                    (weighted, g)
                })
                .collect();
            Terms { pairs }
        },
    ))
}

/// Monte Carlo Fisher: for each input, `m` labels drawn from the model's own
/// predictive distribution; outer products of their gradients are averaged.
pub fn fisher_mc(
    spec: &NetworkSpec,
    params: &ParamVector,
    batch: &[Example<'_>],
    m: usize,
    seed: u64,
    assembly: impl Into<Assembly>,
) -> Result<InfoMatrix> {
    if m == 0 {
        return Err(TicError::InvalidArgument("Monte Carlo sample count must be at least 1".into()));
    }
    let assembly = assembly.into();
    validate(spec, params, batch, assembly)?;
    let probs: Vec<Vec<f64>> = batch
        .par_iter()
        .map(|ex| softmax(forward_cached(spec, params, ex.x).logits()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(batch.len());
    for p in &probs {
        let dist = WeightedIndex::new(p).map_err(|e| TicError::InvalidArgument(e.to_string()))?;
        draws.push((0..m).map(|_| dist.sample(&mut rng)).collect::<Vec<usize>>());
    }
    let d = params.len();
    Ok(assemble(
        params,
        batch.len(),
        assembly.representation,
        1.0 / (batch.len() * m) as f64,
        |i| {
            let cache = forward_cached(spec, params, batch[i].x);
            let pairs = draws[i]
                .iter()
                .map(|&y| {
                    let mut g = vec![0.0; d];
                    backward(spec, params, &cache, &logit_residual(cache.logits(), y), &mut g);
                    (g.clone(), g)
                })
                .collect();
            Terms { pairs }
        },
    ))
}

/// Uncentered gradient covariance `(1/n) sum_i g_i g_i^T` at the true labels.
pub fn grad_covariance(
    spec: &NetworkSpec,
    params: &ParamVector,
    batch: &[Example<'_>],
    assembly: impl Into<Assembly>,
) -> Result<InfoMatrix> {
    let assembly = assembly.into();
    validate(spec, params, batch, assembly)?;
    Ok(assemble(
        params,
        batch.len(),
        assembly.representation,
        1.0 / batch.len() as f64,
        |i| {
            let g = grad(spec, params, batch[i].x, batch[i].label).expect("validated");
            Terms {
                pairs: vec![(g.clone(), g)],
            }
        },
    ))
}

/// `Tr(C) = (1/n) sum_i |g_i|^2` without forming any matrix.
pub fn grad_covariance_trace(spec: &NetworkSpec, params: &ParamVector, batch: &[Example<'_>]) -> Result<f64> {
    let diag = grad_covariance(spec, params, batch, Representation::Diag)?;
    Ok(diag.trace())
}

/// Dense Hessian of the batch-mean loss by central differences of the
/// gradient, symmetrized. Only meant for audit runs on small models.
pub fn hessian_finite_difference(
    spec: &NetworkSpec,
    params: &ParamVector,
    batch: &[Example<'_>],
    step: f64,
    dense_cap: usize,
) -> Result<DenseSymMatrix> {
    validate(spec, params, batch, Assembly::new(Representation::Dense).with_cap(dense_cap))?;
    let d = params.len();
    let mut values = vec![0.0; d * d];
    for j in 0..d {
        let mut plus = params.clone();
        plus.values_mut()[j] += step;
        let mut minus = params.clone();
        minus.values_mut()[j] -= step;
        let (_, gp) = batch_loss_and_grad(spec, &plus, batch)?;
        let (_, gm) = batch_loss_and_grad(spec, &minus, batch)?;
        for i in 0..d {
            values[i * d + j] = (gp[i] - gm[i]) / (2.0 * step);
        }
    }
    DenseSymMatrix::from_row_major(d, values)
}

/// Empirical NTK Gram matrix `J J^T` for stacked logit Jacobians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NtkGram(pub DenseSymMatrix);

impl NtkGram {
    /// `|K - reference|_F / |reference|_F`.
    pub fn relative_drift(&self, reference: &NtkGram) -> f64 {
        self.0.relative_frobenius_distance(&reference.0)
    }
}

pub fn ntk_gram(spec: &NetworkSpec, params: &ParamVector, probe: &[&[f64]]) -> Result<NtkGram> {
    if probe.is_empty() {
        return Err(TicError::Empty("probe batch"));
    }
    let size = probe.len() * spec.num_classes;
    if size > NTK_SIZE_CAP {
        return Err(TicError::CapExceeded {
            dim: size,
            cap: NTK_SIZE_CAP,
        });
    }
    for x in probe {
        check_input(spec, params, x)?;
    }
    let jacobians: Vec<OutputJacobian> = probe
        .par_iter()
        .map(|x| jacobian_from_cache(spec, params, &forward_cached(spec, params, x)))
        .collect();
    let rows: Vec<&[f64]> = jacobians
        .iter()
        .flat_map(|j| (0..j.num_outputs).map(move |k| j.row(k)))
        .collect();
    let mut values = vec![0.0; size * size];
    for a in 0..size {
        for b in a..size {
            let v: f64 = rows[a].iter().zip(rows[b]).map(|(x, y)| x * y).sum();
            values[a * size + b] = v;
            values[b * size + a] = v;
        }
    }
    Ok(NtkGram(DenseSymMatrix::from_row_major(size, values)?))
}

const DUMP_MAGIC: &[u8; 4] = b"TICM";

/// Writes a matrix as: magic `TICM`, u32 dimension, u32 representation tag
/// (0 dense, 1 block, 2 diagonal), u32 reserved zero, then little-endian
/// `f64` payload. Dense payloads are `d*d` row-major values, diagonal
/// payloads `d` values; block payloads start with a u32 block count and
/// one u32 size per block, followed by each block row-major.
pub fn write_matrix<W: Write>(matrix: &InfoMatrix, mut out: W) -> Result<()> {
    let dim = match matrix {
        InfoMatrix::Dense(m) => m.dim(),
        InfoMatrix::Block(m) => m.dim(),
        InfoMatrix::Diag(m) => m.len(),
    };
    out.write_all(DUMP_MAGIC)?;
    out.write_all(&(dim as u32).to_le_bytes())?;
    out.write_all(&matrix.representation().tag().to_le_bytes())?;
    out.write_all(&0u32.to_le_bytes())?;
    let mut put = |v: f64| out.write_all(&v.to_le_bytes());
    match matrix {
        InfoMatrix::Dense(m) => {
            for &v in m.values() {
                put(v)?;
            }
        }
        InfoMatrix::Diag(m) => {
            for &v in m.values() {
                put(v)?;
            }
        }
        InfoMatrix::Block(m) => {
            drop(put);
            out.write_all(&(m.blocks().len() as u32).to_le_bytes())?;
            for b in m.blocks() {
                out.write_all(&(b.dim() as u32).to_le_bytes())?;
            }
            for b in m.blocks() {
                for &v in b.values() {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn read_matrix<R: Read>(mut input: R) -> Result<InfoMatrix> {
    let mut header = [0u8; 16];
    input.read_exact(&mut header)?;
    if &header[..4] != DUMP_MAGIC {
        return Err(TicError::Format("missing TICM magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes"));
    let dim = word(4) as usize;
    let tag = word(8);
    let read_u32 = |input: &mut R| -> Result<u32> {
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    };
    let read_f64s = |input: &mut R, count: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; count * 8];
        input.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    };
    match tag {
        0 => Ok(InfoMatrix::Dense(DenseSymMatrix::from_row_major(dim, read_f64s(&mut input, dim * dim)?)?)),
        2 => Ok(InfoMatrix::Diag(DiagVector::new(read_f64s(&mut input, dim)?))),
        1 => {
            let count = read_u32(&mut input)? as usize;
            let sizes = (0..count)
                .map(|_| read_u32(&mut input).map(|s| s as usize))
                .collect::<Result<Vec<usize>>>()?;
            if sizes.iter().sum::<usize>() != dim {
                return Err(TicError::Format("block sizes do not sum to the dimension".into()));
            }
            let blocks = sizes
                .iter()
                .map(|&s| DenseSymMatrix::from_row_major(s, read_f64s(&mut input, s * s)?))
                .collect::<Result<Vec<_>>>()?;
            Ok(InfoMatrix::Block(BlockDiagMatrix::new(blocks)))
        }
        other => Err(TicError::Format(format!("unknown representation tag {other}"))),
    }
}
