//! Channel recalibration from first- and second-order channel statistics.
//!
//! Both blocks read the same `H×W×D` map `X`. The first-order block gates on
//! the per-channel spatial mean; the second-order block gates on the row
//! means of the covariance square root. The two recalibrated maps are summed.

use rand::Rng;

use crate::backend::Backend;
use crate::covariance::{centered_covariance, newton_schulz_sqrt};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reduction ratio of the gating bottleneck.
pub const REDUCTION: usize = 4;

/// Bias-free bottleneck weights `W_C: D → D/4` and `W_A: D/4 → D`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingParams {
    pub w_c: Tensor,
    pub w_a: Tensor,
}

fn check_channels(d: usize) -> Result<()> {
    if d == 0 || !d.is_multiple_of(REDUCTION) {
        return Err(Error::config(format!(
            "channel count {d} is not a positive multiple of {REDUCTION}"
        )));
    }
    Ok(())
}

fn uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
    )
    .expect("shape")
}

impl GatingParams {
    /// Uniform in `±1/√fan_in`.
    pub fn new(d: usize, rng: &mut impl Rng) -> Result<Self> {
        check_channels(d)?;
        let r = d / REDUCTION;
        Ok(Self {
            w_c: uniform(rng, &[r, d], d),
            w_a: uniform(rng, &[d, r], r),
        })
    }

    pub fn zeros(d: usize) -> Result<Self> {
        check_channels(d)?;
        let r = d / REDUCTION;
        Ok(Self {
            w_c: Tensor::zeros(&[r, d]),
            w_a: Tensor::zeros(&[d, r]),
        })
    }

    pub fn channels(&self) -> usize {
        self.w_c.shape()[1]
    }
}

/// Per-channel spatial mean of an `H×W×D` map.
pub fn first_order_descriptor<B: Backend>(b: &B, x: &B::Value) -> Result<B::Value> {
    let s = b.shape(x);
    if s.len() != 3 {
        return Err(Error::dim("first_order_descriptor", &s, &[0, 0, 0]));
    }
    let flat = b.reshape(x, &[s[0] * s[1], s[2]])?;
    b.mean_axis(&flat, 0)
}

/// Row means of a square `D×D` matrix.
pub fn second_order_descriptor<B: Backend>(b: &B, y_hat: &B::Value) -> Result<B::Value> {
    let s = b.shape(y_hat);
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::dim("second_order_descriptor", &s, &s));
    }
    b.mean_axis(y_hat, 1)
}

/// `σ(W_A · relu(W_C · κ))` as a length-D vector.
pub fn gate<B: Backend>(
    b: &B,
    kappa: &B::Value,
    w_c: &B::Value,
    w_a: &B::Value,
) -> Result<B::Value> {
    Ok(gate_with_hidden(b, kappa, w_c, w_a)?.1)
}

/// [`gate`] plus the `D/4` bottleneck activation.
pub fn gate_with_hidden<B: Backend>(
    b: &B,
    kappa: &B::Value,
    w_c: &B::Value,
    w_a: &B::Value,
) -> Result<(B::Value, B::Value)> {
    let d = b.shape(kappa).iter().product::<usize>();
    let col = b.reshape(kappa, &[d, 1])?;
    let hidden = b.relu(&b.matmul(w_c, &col)?);
    let s = b.sigmoid(&b.matmul(w_a, &hidden)?);
    let r = b.shape(&hidden)[0];
    Ok((b.reshape(&hidden, &[r])?, b.reshape(&s, &[d])?))
}

/// Scales channel `d` of `x` by `s[d]`.
pub fn recalibrate<B: Backend>(b: &B, x: &B::Value, s: &B::Value) -> Result<B::Value> {
    b.channel_mul(x, s)
}

pub fn fuse_multi_order<B: Backend>(b: &B, x_st: &B::Value, x_nd: &B::Value) -> Result<B::Value> {
    b.add(x_st, x_nd)
}

/// Gating weights of both blocks as backend values.
pub struct ChannelWeights<V> {
    pub w_c1: V,
    pub w_a1: V,
    pub w_c2: V,
    pub w_a2: V,
}

/// Intermediate quantities of one channel-module evaluation.
pub struct ChannelOutput<V> {
    pub fused: V,
    pub s_first: V,
    pub s_second: V,
    pub degenerate: bool,
}

/// Full module: descriptors, gates, recalibration and fusion.
pub fn channel_module<B: Backend>(
    b: &B,
    x: &B::Value,
    w: &ChannelWeights<B::Value>,
    ns_iterations: usize,
) -> Result<ChannelOutput<B::Value>> {
    channel_module_traced(b, x, w, ns_iterations, &mut |_, _| {})
}

/// [`channel_module`], reporting each intermediate shape to `record`.
pub fn channel_module_traced<B: Backend>(
    b: &B,
    x: &B::Value,
    w: &ChannelWeights<B::Value>,
    ns_iterations: usize,
    record: &mut dyn FnMut(&'static str, Vec<usize>),
) -> Result<ChannelOutput<B::Value>> {
    let s = b.shape(x);
    record("X", s.clone());
    let kappa_st = first_order_descriptor(b, x)?;
    record("GAP", b.shape(&kappa_st));
    let (hidden, s_first) = gate_with_hidden(b, &kappa_st, &w.w_c1, &w.w_a1)?;
    record("conv1_1", b.shape(&hidden));
    record("conv1_2", b.shape(&s_first));
    let x_st = recalibrate(b, x, &s_first)?;

    let flat = b.reshape(x, &[s[0] * s[1], s[2]])?;
    let sigma = centered_covariance(b, &flat)?;
    let root = newton_schulz_sqrt(b, &sigma, ns_iterations)?;
    let kappa_nd = second_order_descriptor(b, &root.y_hat)?;
    record("GCP", b.shape(&kappa_nd));
    let (hidden, s_second) = gate_with_hidden(b, &kappa_nd, &w.w_c2, &w.w_a2)?;
    record("conv2_1", b.shape(&hidden));
    record("conv2_2", b.shape(&s_second));
    let x_nd = recalibrate(b, x, &s_second)?;

    Ok(ChannelOutput {
        fused: fuse_multi_order(b, &x_st, &x_nd)?,
        s_first,
        s_second,
        degenerate: root.degenerate,
    })
}
