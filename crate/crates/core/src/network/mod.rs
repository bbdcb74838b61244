//! Stacked-hourglass landmark network with spatial and channel correlation
//! modules.
//!
//! Layout per stack: stem (first stack only), hourglass, residual `Q`,
//! spatial fusion against the hourglass input. The last stack's features pass
//! the channel module, then a deconvolution head emits `L + T` sigmoid maps
//! at half the input resolution.

pub mod checkpoint;
pub mod synth;
pub mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{Backend, Eager};
use crate::channel::{channel_module_traced, ChannelWeights, GatingParams};
use crate::covariance::DEFAULT_ITERATIONS;
use crate::error::{Error, Result};
use crate::heatmap::BOUNDARY_COUNT;
use crate::spatial::spatial_module;
use crate::tensor::{PoolKind, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub base_channels: usize,
    pub hourglass_depth: usize,
    pub stacks: usize,
    pub heatmap_size: usize,
    pub landmark_count: usize,
    pub boundary_count: usize,
    /// Newton–Schulz iterations in the channel module.
    pub ns_iterations: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::desk(5)
    }
}

impl NetworkConfig {
    /// 256 px input, 256 channels, four hourglass levels.
    pub fn full(landmark_count: usize) -> Self {
        Self {
            input_size: 256,
            base_channels: 256,
            hourglass_depth: 4,
            stacks: 1,
            heatmap_size: 128,
            landmark_count,
            boundary_count: BOUNDARY_COUNT,
            ns_iterations: DEFAULT_ITERATIONS,
        }
    }

    /// Small enough to train on one CPU core.
    pub fn desk(landmark_count: usize) -> Self {
        Self {
            input_size: 64,
            base_channels: 32,
            hourglass_depth: 2,
            stacks: 1,
            heatmap_size: 32,
            landmark_count,
            boundary_count: BOUNDARY_COUNT,
            ns_iterations: DEFAULT_ITERATIONS,
        }
    }

    pub fn output_channels(&self) -> usize {
        self.landmark_count + self.boundary_count
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if self.heatmap_size * 2 != self.input_size {
            return fail(format!(
                "heatmap_size ({}) must be input_size / 2 ({})",
                self.heatmap_size,
                self.input_size / 2
            ));
        }
        if self.base_channels == 0 || !self.base_channels.is_multiple_of(8) {
            return fail(format!(
                "base_channels ({}) must be a positive multiple of 8",
                self.base_channels
            ));
        }
        if self.hourglass_depth == 0 || self.stacks == 0 || self.ns_iterations == 0 {
            return fail("hourglass_depth, stacks and ns_iterations must be >= 1".into());
        }
        let unit = 4usize << self.hourglass_depth;
        if self.input_size == 0 || !self.input_size.is_multiple_of(unit) {
            return fail(format!(
                "input_size ({}) must be a multiple of {unit} for depth {}",
                self.input_size, self.hourglass_depth
            ));
        }
        if self.landmark_count == 0 {
            return fail("landmark_count must be >= 1".into());
        }
        Ok(())
    }

    /// SHA-256 over the canonical TOML form.
    pub fn fingerprint(&self) -> [u8; 32] {
        let text = toml::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes()).into()
    }
}

/// Named learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Convolution followed by a per-channel affine map.
#[derive(Clone, Debug)]
struct ConvUnit {
    kernel: usize,
    scale: usize,
    shift: usize,
    stride: usize,
    pad: usize,
}

/// Bottleneck residual block, `out/4` inner width, projected skip when the
/// width changes.
#[derive(Clone, Debug)]
struct Residual {
    a: ConvUnit,
    b: ConvUnit,
    c: ConvUnit,
    skip: Option<ConvUnit>,
}

#[derive(Clone, Debug)]
struct HourglassLevel {
    branch: Residual,
    low1: Residual,
    inner: Inner,
    low3: Residual,
}

#[derive(Clone, Debug)]
enum Inner {
    Deeper(Box<HourglassLevel>),
    Bottom(Residual),
}

#[derive(Clone, Debug)]
struct Head {
    deconv: usize,
    scale: usize,
    shift: usize,
    out: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct Stack {
    hourglass: HourglassLevel,
    q: Residual,
    lambda: usize,
    /// Intermediate head and merge back into the trunk, all but the last stack.
    side: Option<(Head, ConvUnit)>,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: ConvUnit,
    res1: Residual,
    res2: [Residual; 2],
    widen: ConvUnit,
    stacks: Vec<Stack>,
    gating: [usize; 4],
    head: Head,
}

/// Parameters, optimizer momentum and iteration count of one network.
#[derive(Clone, Debug)]
pub struct NetworkState {
    pub config: NetworkConfig,
    pub params: Vec<Param>,
    /// Momentum buffers, aligned with `params`.
    pub velocity: Vec<Tensor>,
    pub iteration: u64,
    layout: Layout,
}

struct Builder<'a, R: Rng> {
    params: Vec<Param>,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn push(&mut self, name: String, tensor: Tensor) -> usize {
        self.params.push(Param { name, tensor });
        self.params.len() - 1
    }

    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> usize {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.push(name, Tensor::new(shape, data).expect("shape"))
    }

    fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, stride: usize) -> ConvUnit {
        let bound = (6.0 / (k * k * cin) as f64).sqrt();
        ConvUnit {
            kernel: self.uniform(format!("{name}.kernel"), &[k, k, cin, cout], bound),
            scale: self.push(format!("{name}.scale"), Tensor::ones(&[cout])),
            shift: self.push(format!("{name}.shift"), Tensor::zeros(&[cout])),
            stride,
            pad: k / 2,
        }
    }

    fn residual(&mut self, name: &str, cin: usize, cout: usize) -> Residual {
        let mid = cout / 4;
        Residual {
            a: self.conv(&format!("{name}.a"), 1, cin, mid, 1),
            b: self.conv(&format!("{name}.b"), 3, mid, mid, 1),
            c: self.conv(&format!("{name}.c"), 1, mid, cout, 1),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), 1, cin, cout, 1)),
        }
    }

    fn hourglass(&mut self, name: &str, level: usize, depth: usize, c: usize) -> HourglassLevel {
        let branch = self.residual(&format!("{name}.branch{level}"), c, c);
        let low1 = self.residual(&format!("{name}.low1_{level}"), c, c);
        let inner = if level == depth {
            Inner::Bottom(self.residual(&format!("{name}.bottom"), c, c))
        } else {
            Inner::Deeper(Box::new(self.hourglass(name, level + 1, depth, c)))
        };
        let low3 = self.residual(&format!("{name}.low3_{level}"), c, c);
        HourglassLevel {
            branch,
            low1,
            inner,
            low3,
        }
    }

    fn head(&mut self, name: &str, c: usize, outputs: usize) -> Head {
        let half = c / 2;
        let deconv_bound = (6.0 / (4 * c) as f64).sqrt();
        let out_bound = 1.0 / ((9 * half) as f64).sqrt();
        Head {
            deconv: self.uniform(
                format!("{name}.deconv.kernel"),
                &[4, 4, c, half],
                deconv_bound,
            ),
            scale: self.push(format!("{name}.deconv.scale"), Tensor::ones(&[half])),
            shift: self.push(format!("{name}.deconv.shift"), Tensor::zeros(&[half])),
            out: self.uniform(
                format!("{name}.out.kernel"),
                &[3, 3, half, outputs],
                out_bound,
            ),
            bias: self.push(format!("{name}.out.bias"), Tensor::zeros(&[outputs])),
        }
    }
}

/// Which correlation modules take part in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    /// Plain stacked hourglass: spatial fusion and channel module skipped.
    Baseline,
}

/// Per-stack head outputs, each `[heatmap, heatmap, L + T]`; the last entry
/// is the network prediction.
pub struct ForwardOutput<V> {
    pub stacks: Vec<V>,
    /// Set when the covariance in the channel module had zero trace.
    pub degenerate: bool,
}

/// `(layer, output shape)` rows in evaluation order.
pub type Trace = Vec<(String, Vec<usize>)>;

struct Recorder<'a>(Option<&'a mut Trace>);

impl Recorder<'_> {
    fn push(&mut self, name: impl Into<String>, shape: Vec<usize>) {
        if let Some(t) = self.0.as_deref_mut() {
            t.push((name.into(), shape));
        }
    }
}

struct Ctx<'a, B: Backend> {
    b: &'a B,
    p: &'a [B::Value],
}

impl<B: Backend> Ctx<'_, B> {
    fn unit(&self, x: &B::Value, u: &ConvUnit) -> Result<B::Value> {
        let y = self.b.conv2d(x, &self.p[u.kernel], u.stride, u.pad)?;
        let y = self.b.channel_mul(&y, &self.p[u.scale])?;
        self.b.channel_add(&y, &self.p[u.shift])
    }

    fn unit_relu(&self, x: &B::Value, u: &ConvUnit) -> Result<B::Value> {
        Ok(self.b.relu(&self.unit(x, u)?))
    }

    fn residual(&self, x: &B::Value, r: &Residual) -> Result<B::Value> {
        let y = self.unit_relu(x, &r.a)?;
        let y = self.unit_relu(&y, &r.b)?;
        let y = self.unit(&y, &r.c)?;
        let skip = match &r.skip {
            Some(s) => self.unit(x, s)?,
            None => x.clone(),
        };
        Ok(self.b.relu(&self.b.add(&y, &skip)?))
    }

    fn hourglass(
        &self,
        x: &B::Value,
        h: &HourglassLevel,
        level: usize,
        rec: &mut Recorder,
    ) -> Result<B::Value> {
        let b = self.b;
        let up1 = self.residual(x, &h.branch)?;
        rec.push(format!("branch{level}"), b.shape(&up1));
        let low = b.pool2d(x, PoolKind::Max, 2, 2)?;
        rec.push(format!("max_pooling{level}"), b.shape(&low));
        let low1 = self.residual(&low, &h.low1)?;
        rec.push("residual block", b.shape(&low1));
        let low2 = match &h.inner {
            Inner::Bottom(r) => {
                let y = self.residual(&low1, r)?;
                rec.push("residual block", b.shape(&y));
                y
            }
            Inner::Deeper(next) => self.hourglass(&low1, next, level + 1, rec)?,
        };
        let low3 = self.residual(&low2, &h.low3)?;
        rec.push("residual block", b.shape(&low3));
        let up2 = b.upsample2x(&low3)?;
        rec.push(format!("upsampling{level}"), b.shape(&up2));
        let out = b.add(&up1, &up2)?;
        rec.push(format!("add_branch{level}"), b.shape(&out));
        Ok(out)
    }

    fn head(&self, x: &B::Value, h: &Head, rec: &mut Recorder) -> Result<B::Value> {
        let b = self.b;
        let y = b.conv_transpose2d(x, &self.p[h.deconv], 2, 1)?;
        let y = b.channel_add(&b.channel_mul(&y, &self.p[h.scale])?, &self.p[h.shift])?;
        let y = b.relu(&y);
        rec.push("deconv", b.shape(&y));
        let y = b.conv2d(&y, &self.p[h.out], 1, 1)?;
        let y = b.sigmoid(&b.channel_add(&y, &self.p[h.bias])?);
        rec.push("out", b.shape(&y));
        Ok(y)
    }
}

impl NetworkState {
    /// Deterministic initialization from `seed`.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.base_channels;
        let mut bld = Builder {
            params: Vec::new(),
            rng: &mut rng,
        };
        let stem = bld.conv("stem", 7, 3, c / 4, 2);
        let res1 = bld.residual("res1", c / 4, c / 2);
        let res2 = [
            bld.residual("res2a", c / 2, c / 2),
            bld.residual("res2b", c / 2, c / 2),
        ];
        let widen = bld.conv("widen", 3, c / 2, c, 1);
        let mut stacks = Vec::with_capacity(config.stacks);
        for s in 0..config.stacks {
            let name = format!("stack{s}");
            let hourglass = bld.hourglass(&name, 1, config.hourglass_depth, c);
            let q = bld.residual(&format!("{name}.q"), c, c);
            let lambda = bld.push(format!("{name}.lambda"), Tensor::scalar(0.0));
            let side = (s + 1 < config.stacks).then(|| {
                let head = bld.head(&format!("{name}.side"), c, config.output_channels());
                let merge = bld.conv(&format!("{name}.merge"), 1, c, c, 1);
                (head, merge)
            });
            stacks.push(Stack {
                hourglass,
                q,
                lambda,
                side,
            });
        }
        let g1 = GatingParams::new(c, bld.rng)?;
        let g2 = GatingParams::new(c, bld.rng)?;
        let gating = [
            bld.push("channel.w_c1".into(), g1.w_c),
            bld.push("channel.w_a1".into(), g1.w_a),
            bld.push("channel.w_c2".into(), g2.w_c),
            bld.push("channel.w_a2".into(), g2.w_a),
        ];
        let head = bld.head("head", c, config.output_channels());
        let params = bld.params;
        let velocity = params
            .iter()
            .map(|p| Tensor::zeros(p.tensor.shape()))
            .collect();
        Ok(Self {
            config,
            params,
            velocity,
            iteration: 0,
            layout: Layout {
                stem,
                res1,
                res2,
                widen,
                stacks,
                gating,
                head,
            },
        })
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Indices of the spatial fusion weights, one per stack.
    pub fn lambda_indices(&self) -> Vec<usize> {
        self.layout.stacks.iter().map(|s| s.lambda).collect()
    }

    /// Indices of the four gating matrices.
    pub fn gating_indices(&self) -> [usize; 4] {
        self.layout.gating
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Parameters as backend values; learnable on a tape.
    pub fn bind<B: Backend>(&self, b: &B) -> Vec<B::Value> {
        self.params
            .iter()
            .map(|p| b.parameter(p.tensor.clone()))
            .collect()
    }

    /// Runs the network on an `[input, input, 3]` image.
    pub fn forward<B: Backend>(
        &self,
        b: &B,
        params: &[B::Value],
        image: &B::Value,
        variant: Variant,
        trace: Option<&mut Trace>,
    ) -> Result<ForwardOutput<B::Value>> {
        let cfg = &self.config;
        let expect = [cfg.input_size, cfg.input_size, 3];
        if b.shape(image) != expect {
            return Err(Error::dim("network input", &b.shape(image), &expect));
        }
        if params.len() != self.params.len() {
            return Err(Error::dim(
                "network parameters",
                &[params.len()],
                &[self.params.len()],
            ));
        }
        let mut rec = Recorder(trace);
        let ctx = Ctx { b, p: params };
        let l = &self.layout;
        rec.push("input", b.shape(image));

        let x = ctx.unit_relu(image, &l.stem)?;
        rec.push("conv/batch_norm", b.shape(&x));
        let x = ctx.residual(&x, &l.res1)?;
        rec.push("residual block", b.shape(&x));
        let x = b.pool2d(&x, PoolKind::Avg, 2, 2)?;
        rec.push("avg_pooling", b.shape(&x));
        let mut x = x;
        for r in &l.res2 {
            x = ctx.residual(&x, r)?;
            rec.push("residual block", b.shape(&x));
        }
        let mut x = ctx.unit_relu(&x, &l.widen)?;
        rec.push("conv", b.shape(&x));

        let mut outputs = Vec::with_capacity(l.stacks.len());
        let mut features = None;
        for stack in &l.stacks {
            let hg = ctx.hourglass(&x, &stack.hourglass, 1, &mut rec)?;
            let q = ctx.residual(&hg, &stack.q)?;
            rec.push("residual block (Q)", b.shape(&q));
            let fused = match variant {
                Variant::Full => spatial_module(b, &x, &q, &params[stack.lambda])?,
                Variant::Baseline => q,
            };
            rec.push("P'", b.shape(&fused));
            match &stack.side {
                Some((head, merge)) => {
                    outputs.push(ctx.head(&fused, head, &mut rec)?);
                    x = b.add(&x, &ctx.unit(&fused, merge)?)?;
                }
                None => features = Some(fused),
            }
        }
        let features = features.expect("last stack has no side head");

        let mut degenerate = false;
        let x = match variant {
            Variant::Full => {
                let g = l.gating;
                let w = ChannelWeights {
                    w_c1: params[g[0]].clone(),
                    w_a1: params[g[1]].clone(),
                    w_c2: params[g[2]].clone(),
                    w_a2: params[g[3]].clone(),
                };
                let out = channel_module_traced(
                    b,
                    &features,
                    &w,
                    cfg.ns_iterations,
                    &mut |name, shape| rec.push(name, shape),
                )?;
                degenerate = out.degenerate;
                out.fused
            }
            Variant::Baseline => features,
        };
        outputs.push(ctx.head(&x, &l.head, &mut rec)?);
        Ok(ForwardOutput {
            stacks: outputs,
            degenerate,
        })
    }

    /// Eager forward returning the final `[heatmap, heatmap, L + T]` maps.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let params = self.bind(&Eager);
        let mut out = self.forward(&Eager, &params, image, Variant::Full, None)?;
        Ok(out.stacks.pop().expect("at least one stack"))
    }

    /// Eager forward recording every layer's output shape.
    pub fn shape_trace(&self, image: &Tensor) -> Result<Trace> {
        let params = self.bind(&Eager);
        let mut trace = Trace::new();
        self.forward(&Eager, &params, image, Variant::Full, Some(&mut trace))?;
        Ok(trace)
    }
}
