//! Multi-order spatial correlations between a block's input and output maps.
//!
//! `P` and `Q` are `N×D` feature maps (positions by channels). The attention
//! map is `softmax_rows(PPᵀ + PQᵀ + QQᵀ)` and the fused output is
//! `λ·(Ô·Q) + Q` with a single learned scalar `λ` that starts at 0.

use crate::backend::Backend;
use crate::error::{Error, Result};

/// Shape bookkeeping and the fusion weight of one correlation module.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialCorrState {
    pub lambda: f64,
    pub n: usize,
    pub d: usize,
}

impl SpatialCorrState {
    pub fn new(n: usize, d: usize) -> Self {
        Self { lambda: 0.0, n, d }
    }
}

fn require_pair<B: Backend>(
    b: &B,
    p: &B::Value,
    q: &B::Value,
    op: &'static str,
) -> Result<(usize, usize)> {
    let (ps, qs) = (b.shape(p), b.shape(q));
    if ps.len() != 2 || ps != qs {
        return Err(Error::dim(op, &ps, &qs));
    }
    Ok((ps[0], ps[1]))
}

/// Row-stochastic `N×N` correlation map `Ô`.
///
/// Evaluated as `P(P+Q)ᵀ + QQᵀ`, which equals the three-term sum with one
/// fewer `N×N` product.
pub fn second_order_correlations<B: Backend>(
    b: &B,
    p: &B::Value,
    q: &B::Value,
) -> Result<B::Value> {
    require_pair(b, p, q, "second_order_correlations")?;
    let pq = b.add(p, q)?;
    let pq_t = b.transpose(&pq)?;
    let q_t = b.transpose(q)?;
    let s = b.add(&b.matmul(p, &pq_t)?, &b.matmul(q, &q_t)?)?;
    b.softmax_rows(&s)
}

/// `λ·(Ô·Q) + Q`; `lambda` is a single-element value so it can be learned.
pub fn multi_order_fuse<B: Backend>(
    b: &B,
    o_hat: &B::Value,
    q: &B::Value,
    lambda: &B::Value,
) -> Result<B::Value> {
    let (os, qs) = (b.shape(o_hat), b.shape(q));
    if os.len() != 2 || qs.len() != 2 || os[0] != os[1] || os[1] != qs[0] {
        return Err(Error::dim("multi_order_fuse", &os, &qs));
    }
    let attended = b.matmul(o_hat, q)?;
    b.add(&b.mul_scalar(&attended, lambda)?, q)
}

/// Both steps on `H×W×D` maps: flattens, correlates, fuses, restores shape.
pub fn spatial_module<B: Backend>(
    b: &B,
    input: &B::Value,
    output: &B::Value,
    lambda: &B::Value,
) -> Result<B::Value> {
    let shape = b.shape(output);
    if shape.len() != 3 || b.shape(input) != shape {
        return Err(Error::dim("spatial_module", &b.shape(input), &shape));
    }
    let flat = [shape[0] * shape[1], shape[2]];
    let p = b.reshape(input, &flat)?;
    let q = b.reshape(output, &flat)?;
    let o_hat = second_order_correlations(b, &p, &q)?;
    let fused = multi_order_fuse(b, &o_hat, &q, lambda)?;
    b.reshape(&fused, &shape)
}
