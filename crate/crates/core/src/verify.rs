//! Oracle and invariant suites behind `mmdn verify`.
//!
//! Each check carries its measured value and tolerance so a report can be
//! read by scripts as well as people.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backend::{Backend, Eager};
use crate::channel::{channel_module, ChannelWeights, GatingParams};
use crate::covariance::{centered_covariance, matrix_sqrt_oracle, newton_schulz_sqrt};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check, finite_diff_check_coords};
use crate::heatmap::{
    boundary_distance, decode_argmax, encode_boundary_heatmap, encode_landmark_heatmap,
    gaussian_map, BoundaryProfile, Heatmap, HeatmapKind, SIGMA1, SIGMA2, XI,
};
use crate::loss::{consistency_to_target, js_divergence, js_to_target, normalize_to_distribution};
use crate::network::{NetworkConfig, NetworkState, Variant};
use crate::search::{run_corrupted_suite, search_optimal, SearchConfig};
use crate::spatial::spatial_module;
use crate::tensor::{self, PoolKind, Tensor};

/// Tolerance for single operations and modules.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Tolerance for the end-to-end network probe.
pub const NETWORK_TOLERANCE: f64 = 1e-3;
/// Relative tolerance of the matrix square root checks.
pub const SQRT_TOLERANCE: f64 = 1e-3;

const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Gradcheck,
    NewtonSchulz,
    Js,
    Search,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "gradcheck" => Ok(Self::Gradcheck),
            "newton_schulz" => Ok(Self::NewtonSchulz),
            "js" => Ok(Self::Js),
            "search" => Ok(Self::Search),
            "all" => Ok(Self::All),
            _ => Err(Error::config(format!("unknown suite `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Newton–Schulz iterations under test.
    pub ns_iterations: usize,
    pub spd_trials: usize,
    pub js_pairs: usize,
    pub search_trials: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            ns_iterations: 7,
            spd_trials: 100,
            js_pairs: 1000,
            search_trials: 500,
        }
    }
}

/// Outcome of one invariant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub suite: String,
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{} measured={:.3e} tolerance={:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.measured,
            self.tolerance
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    fn below(&mut self, suite: &str, name: impl Into<String>, measured: f64, tolerance: f64) {
        self.checks.push(Check {
            suite: suite.into(),
            name: name.into(),
            measured,
            tolerance,
            passed: measured < tolerance,
        });
    }

    fn at_most(&mut self, suite: &str, name: impl Into<String>, measured: f64, tolerance: f64) {
        self.checks.push(Check {
            suite: suite.into(),
            name: name.into(),
            measured,
            tolerance,
            passed: measured <= tolerance,
        });
    }
}

/// Runs `suite` (every suite for [`Suite::All`]).
pub fn run(suite: Suite, cfg: &VerifyConfig, seed: u64) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    let all = suite == Suite::All;
    if all || suite == Suite::Gradcheck {
        gradcheck_suite(&mut report, seed)?;
    }
    if all || suite == Suite::NewtonSchulz {
        newton_schulz_suite(&mut report, cfg, seed)?;
    }
    if all || suite == Suite::Js {
        js_suite(&mut report, cfg, seed)?;
    }
    if all || suite == Suite::Search {
        search_suite(&mut report, cfg, seed)?;
    }
    Ok(report)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
        .expect("shape matches data")
}

/// Entries in `±[0.1, 1]`, away from the kinks of relu-like ops.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// `Σ out ⊙ probe`: a scalar that sees every output element.
fn project(g: &Graph, out: &Var, probe: &Tensor) -> Result<Var> {
    Ok(g.sum(&g.mul(out, &g.constant(probe.clone()))?))
}

// ---------------------------------------------------------------------------
// Gradient checks
// ---------------------------------------------------------------------------

type UnaryOp = fn(&Graph, &Var) -> Result<Var>;

fn gradcheck_suite(report: &mut VerifyReport, seed: u64) -> Result<()> {
    const S: &str = "gradcheck";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let shaped: [(&str, &[usize], UnaryOp); 14] = [
        ("transpose", &[3, 4], |g, x| g.transpose(x)),
        ("scale", &[3, 4], |g, x| Ok(g.scale(x, -1.7))),
        ("add_scalar", &[3, 4], |g, x| Ok(g.add_scalar(x, 0.3))),
        ("relu", &[3, 4], |g, x| Ok(g.relu(x))),
        ("sigmoid", &[3, 4], |g, x| Ok(g.sigmoid(x))),
        ("exp", &[3, 4], |g, x| Ok(g.exp(x))),
        ("clamp_min", &[3, 4], |g, x| Ok(g.clamp_min(x, 0.0))),
        ("softmax_rows", &[3, 4], |g, x| g.softmax_rows(x)),
        ("mean_axis0", &[3, 4], |g, x| g.mean_axis(x, 0)),
        ("mean_axis1", &[3, 4], |g, x| g.mean_axis(x, 1)),
        ("reshape", &[3, 4], |g, x| g.reshape(x, &[2, 6])),
        ("max_pool", &[4, 4, 2], |g, x| {
            g.pool2d(x, PoolKind::Max, 2, 2)
        }),
        ("avg_pool", &[4, 4, 2], |g, x| {
            g.pool2d(x, PoolKind::Avg, 2, 2)
        }),
        ("upsample2x", &[3, 3, 2], |g, x| g.upsample2x(x)),
    ];
    for (name, shape, op) in shaped {
        let x = off_zero(&mut rng, shape);
        let out_shape = op_eager(op, &x)?.shape().to_vec();
        let probe = uniform(&mut rng, &out_shape, -1.0, 1.0);
        let err = finite_diff_check(|g: &Graph, v| project(g, &op(g, &v)?, &probe), &x, FD_STEP)?;
        report.below(S, name, err, OP_TOLERANCE);
    }

    let positive: [(&str, UnaryOp); 3] = [
        ("ln", |g, x| Ok(g.ln(x))),
        ("sqrt", |g, x| Ok(g.sqrt(x))),
        ("recip", |g, x| Ok(g.recip(x))),
    ];
    for (name, op) in positive {
        let x = uniform(&mut rng, &[3, 4], 0.5, 2.0);
        let probe = uniform(&mut rng, &[3, 4], -1.0, 1.0);
        let err = finite_diff_check(|g: &Graph, v| project(g, &op(g, &v)?, &probe), &x, FD_STEP)?;
        report.below(S, name, err, OP_TOLERANCE);
    }

    let sq = uniform(&mut rng, &[4, 4], -1.0, 1.0);
    let err = finite_diff_check(|g: &Graph, v| Ok(g.sum(&g.trace(&v)?)), &sq, FD_STEP)?;
    report.below(S, "trace", err, OP_TOLERANCE);

    // Binary ops, differentiated in each argument.
    let (a, b) = (
        uniform(&mut rng, &[3, 4], -1.0, 1.0),
        uniform(&mut rng, &[4, 2], -1.0, 1.0),
    );
    let probe = uniform(&mut rng, &[3, 2], -1.0, 1.0);
    let e1 = finite_diff_check(
        |g: &Graph, v| project(g, &g.matmul(&v, &g.constant(b.clone()))?, &probe),
        &a,
        FD_STEP,
    )?;
    let e2 = finite_diff_check(
        |g: &Graph, v| project(g, &g.matmul(&g.constant(a.clone()), &v)?, &probe),
        &b,
        FD_STEP,
    )?;
    report.below(S, "matmul", e1.max(e2), OP_TOLERANCE);

    type BinaryOp = fn(&Graph, &Var, &Var) -> Result<Var>;
    let binary: [(&str, BinaryOp); 3] = [
        ("add", |g, x, y| g.add(x, y)),
        ("sub", |g, x, y| g.sub(x, y)),
        ("mul", |g, x, y| g.mul(x, y)),
    ];
    for (name, op) in binary {
        let (x, y) = (
            uniform(&mut rng, &[3, 4], -1.0, 1.0),
            uniform(&mut rng, &[3, 4], -1.0, 1.0),
        );
        let probe = uniform(&mut rng, &[3, 4], -1.0, 1.0);
        let e1 = finite_diff_check(
            |g: &Graph, v| project(g, &op(g, &v, &g.constant(y.clone()))?, &probe),
            &x,
            FD_STEP,
        )?;
        let e2 = finite_diff_check(
            |g: &Graph, v| project(g, &op(g, &g.constant(x.clone()), &v)?, &probe),
            &y,
            FD_STEP,
        )?;
        report.below(S, name, e1.max(e2), OP_TOLERANCE);
    }

    let (x, s) = (uniform(&mut rng, &[3, 4], -1.0, 1.0), Tensor::scalar(0.7));
    let probe = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let e1 = finite_diff_check(
        |g: &Graph, v| project(g, &g.mul_scalar(&v, &g.constant(s.clone()))?, &probe),
        &x,
        FD_STEP,
    )?;
    let e2 = finite_diff_check(
        |g: &Graph, v| project(g, &g.mul_scalar(&g.constant(x.clone()), &v)?, &probe),
        &s,
        FD_STEP,
    )?;
    report.below(S, "mul_scalar", e1.max(e2), OP_TOLERANCE);

    let (x, c) = (
        uniform(&mut rng, &[3, 3, 4], -1.0, 1.0),
        uniform(&mut rng, &[4], -1.0, 1.0),
    );
    let probe = uniform(&mut rng, &[3, 3, 4], -1.0, 1.0);
    for (name, mul) in [("channel_mul", true), ("channel_add", false)] {
        let apply = |g: &Graph, x: &Var, c: &Var| {
            if mul {
                g.channel_mul(x, c)
            } else {
                g.channel_add(x, c)
            }
        };
        let e1 = finite_diff_check(
            |g: &Graph, v| project(g, &apply(g, &v, &g.constant(c.clone()))?, &probe),
            &x,
            FD_STEP,
        )?;
        let e2 = finite_diff_check(
            |g: &Graph, v| project(g, &apply(g, &g.constant(x.clone()), &v)?, &probe),
            &c,
            FD_STEP,
        )?;
        report.below(S, name, e1.max(e2), OP_TOLERANCE);
    }
    let probe2 = uniform(&mut rng, &[3, 3, 2], -1.0, 1.0);
    let err = finite_diff_check(
        |g: &Graph, v| project(g, &g.slice_channels(&v, 1, 2)?, &probe2),
        &x,
        FD_STEP,
    )?;
    report.below(S, "slice_channels", err, OP_TOLERANCE);

    for (name, transposed) in [("conv2d", false), ("conv_transpose2d", true)] {
        let x = uniform(&mut rng, &[5, 5, 2], -1.0, 1.0);
        let k = uniform(&mut rng, &[3, 3, 2, 3], -1.0, 1.0);
        let conv = |g: &Graph, x: &Var, k: &Var| {
            if transposed {
                g.conv_transpose2d(x, k, 2, 1)
            } else {
                g.conv2d(x, k, 1, 1)
            }
        };
        let out_shape = Eager.value(&if transposed {
            Eager.conv_transpose2d(&x, &k, 2, 1)?
        } else {
            Eager.conv2d(&x, &k, 1, 1)?
        });
        let probe = uniform(&mut rng, out_shape.shape(), -1.0, 1.0);
        let e1 = finite_diff_check(
            |g: &Graph, v| project(g, &conv(g, &v, &g.constant(k.clone()))?, &probe),
            &x,
            FD_STEP,
        )?;
        let e2 = finite_diff_check(
            |g: &Graph, v| project(g, &conv(g, &g.constant(x.clone()), &v)?, &probe),
            &k,
            FD_STEP,
        )?;
        report.below(S, name, e1.max(e2), OP_TOLERANCE);
    }

    module_checks(report, &mut rng)?;
    network_probe(report, &mut rng)
}

fn op_eager(op: UnaryOp, x: &Tensor) -> Result<Tensor> {
    let g = Graph::new();
    let v = g.leaf(x.clone(), false);
    Ok((*g.tensor(op(&g, &v)?)).clone())
}

fn module_checks(report: &mut VerifyReport, rng: &mut ChaCha8Rng) -> Result<()> {
    const S: &str = "gradcheck";

    // Spatial correlation: inputs P, Q and the fusion weight λ.
    let (p, q) = (
        uniform(rng, &[4, 4, 3], -1.0, 1.0),
        uniform(rng, &[4, 4, 3], -1.0, 1.0),
    );
    let probe = uniform(rng, &[4, 4, 3], -1.0, 1.0);
    let lambda = Tensor::scalar(0.6);
    let spatial =
        |g: &Graph, p: &Var, q: &Var, l: &Var| project(g, &spatial_module(g, p, q, l)?, &probe);
    let e1 = finite_diff_check(
        |g: &Graph, v| spatial(g, &v, &g.constant(q.clone()), &g.constant(lambda.clone())),
        &p,
        FD_STEP,
    )?;
    let e2 = finite_diff_check(
        |g: &Graph, v| spatial(g, &g.constant(p.clone()), &v, &g.constant(lambda.clone())),
        &q,
        FD_STEP,
    )?;
    let e3 = finite_diff_check(
        |g: &Graph, v| spatial(g, &g.constant(p.clone()), &g.constant(q.clone()), &v),
        &lambda,
        FD_STEP,
    )?;
    report.below(S, "spatial_correlation", e1.max(e2).max(e3), OP_TOLERANCE);

    // Covariance and the unrolled square root.
    let x = uniform(rng, &[6, 3], -1.0, 1.0);
    let probe = uniform(rng, &[3, 3], -1.0, 1.0);
    let err = finite_diff_check(
        |g: &Graph, v| {
            let s = centered_covariance(g, &v)?;
            project(g, &newton_schulz_sqrt(g, &s, 5)?.y_hat, &probe)
        },
        &x,
        FD_STEP,
    )?;
    report.below(S, "covariance_sqrt", err, OP_TOLERANCE);

    // Channel recalibration, input and gating weights.
    let x = uniform(rng, &[3, 3, 4], -1.0, 1.0);
    let (g1, g2) = (GatingParams::new(4, rng)?, GatingParams::new(4, rng)?);
    let probe = uniform(rng, &[3, 3, 4], -1.0, 1.0);
    let weights = |g: &Graph| ChannelWeights {
        w_c1: g.constant(g1.w_c.clone()),
        w_a1: g.constant(g1.w_a.clone()),
        w_c2: g.constant(g2.w_c.clone()),
        w_a2: g.constant(g2.w_a.clone()),
    };
    let e1 = finite_diff_check(
        |g: &Graph, v| project(g, &channel_module(g, &v, &weights(g), 5)?.fused, &probe),
        &x,
        FD_STEP,
    )?;
    let e2 = finite_diff_check(
        |g: &Graph, v| {
            let mut w = weights(g);
            w.w_a1 = v;
            project(
                g,
                &channel_module(g, &g.constant(x.clone()), &w, 5)?.fused,
                &probe,
            )
        },
        &g1.w_a,
        FD_STEP,
    )?;
    let e3 = finite_diff_check(
        |g: &Graph, v| {
            let mut w = weights(g);
            w.w_c2 = v;
            project(
                g,
                &channel_module(g, &g.constant(x.clone()), &w, 5)?.fused,
                &probe,
            )
        },
        &g2.w_c,
        FD_STEP,
    )?;
    report.below(S, "channel_recalibration", e1.max(e2).max(e3), OP_TOLERANCE);

    // Landmark encoder as a function of its width.
    let probe = uniform(rng, &[7, 9], -1.0, 1.0);
    let err = finite_diff_check(
        |g: &Graph, s| project(g, &gaussian_map(g, [4.3, 2.0], &s, 9, 7)?, &probe),
        &Tensor::scalar(2.5),
        FD_STEP,
    )?;
    report.below(S, "gaussian_encoder_sigma", err, OP_TOLERANCE);

    // JS loss against a fixed target distribution.
    let pred = uniform(rng, &[6, 6], 0.05, 1.0);
    let gt = Heatmap::new(
        6,
        6,
        uniform(rng, &[36], 0.0, 1.0).data().to_vec(),
        HeatmapKind::Landmark,
    )?;
    let target = Tensor::new(&[6, 6], normalize_to_distribution(&gt).probabilities)?;
    let err = finite_diff_check(|g: &Graph, v| js_to_target(g, &v, &target), &pred, FD_STEP)?;
    report.below(S, "js_loss", err, OP_TOLERANCE);

    let err = finite_diff_check(
        |g: &Graph, v| consistency_to_target(g, &v, [1.0, 4.0], &SearchConfig::default()),
        &pred,
        FD_STEP,
    )?;
    report.below(S, "consistency_term", err, OP_TOLERANCE);
    Ok(())
}

/// Loss of a tiny network against random targets, checked on a few
/// coordinates of parameters spread through the model.
fn network_probe(report: &mut VerifyReport, rng: &mut ChaCha8Rng) -> Result<()> {
    let cfg = NetworkConfig {
        input_size: 16,
        base_channels: 8,
        hourglass_depth: 1,
        stacks: 1,
        heatmap_size: 8,
        landmark_count: 2,
        boundary_count: 2,
        ns_iterations: 5,
    };
    let mut state = NetworkState::build(cfg.clone(), rng.random())?;
    // λ starts at zero, which would hide the correlation branch.
    for p in &mut state.params {
        if p.name.ends_with(".lambda") {
            p.tensor = Tensor::scalar(0.3);
        }
    }
    let image = uniform(rng, &[16, 16, 3], 0.0, 1.0);
    let targets: Vec<Tensor> = (0..cfg.output_channels())
        .map(|_| {
            let t = uniform(rng, &[8, 8], 0.01, 1.0);
            let total: f64 = t.data().iter().sum();
            t.map(|v| v / total)
        })
        .collect();
    let picks = [
        "stem.kernel",
        ".lambda",
        "branch",
        "channel.w_c2",
        "head.deconv.kernel",
        "head.out.bias",
    ];
    let mut worst = 0.0f64;
    for pick in picks {
        let idx = state
            .params
            .iter()
            .position(|p| p.name.contains(pick))
            .ok_or_else(|| {
                Error::contract(format!("network probe: no parameter matching `{pick}`"))
            })?;
        let n = state.params[idx].tensor.len();
        let coords: Vec<usize> = (0..n.min(4)).map(|i| i * n / n.min(4)).collect();
        let loss = |g: &Graph, v: Var| {
            let params: Vec<Var> = state
                .params
                .iter()
                .enumerate()
                .map(|(j, p)| {
                    if j == idx {
                        v
                    } else {
                        g.constant(p.tensor.clone())
                    }
                })
                .collect();
            let out = state.forward(g, &params, &g.constant(image.clone()), Variant::Full, None)?;
            let maps = out.stacks.last().expect("one head");
            let mut total = g.scalar(0.0);
            for (c, t) in targets.iter().enumerate() {
                let ch = g.reshape(&g.slice_channels(maps, c, 1)?, &[8, 8])?;
                total = g.add(&total, &js_to_target(g, &ch, t)?)?;
            }
            Ok(total)
        };
        worst = worst.max(finite_diff_check_coords(
            loss,
            &state.params[idx].tensor,
            FD_STEP,
            &coords,
        )?);
    }
    report.below("gradcheck", "network_probe", worst, NETWORK_TOLERANCE);
    Ok(())
}

// ---------------------------------------------------------------------------
// Newton–Schulz
// ---------------------------------------------------------------------------

/// `M Mᵀ / D + I` with Gaussian `M`: symmetric positive definite with
/// eigenvalues in roughly `[1, 5]`.
pub fn random_spd(rng: &mut impl Rng, d: usize) -> Tensor {
    let m = Tensor::new(
        &[d, d],
        (0..d * d)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )
    .expect("square");
    let mmt = tensor::matmul(&m, &tensor::transpose(&m).expect("rank 2")).expect("square");
    let mut out = mmt.map(|v| v / d as f64);
    for i in 0..d {
        out.data_mut()[i * d + i] += 1.0;
    }
    out
}

fn frobenius(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn relative(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / frobenius(b)
}

/// Worst relative residual `‖Ŷ² − Σ‖/‖Σ‖` and worst relative distance to the
/// eigendecomposition root over `trials` random matrices of size `d`.
pub fn newton_schulz_errors(
    rng: &mut impl Rng,
    d: usize,
    trials: usize,
    k: usize,
) -> Result<(f64, f64)> {
    let (mut residual, mut oracle) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let sigma = random_spd(rng, d);
        let y = newton_schulz_sqrt(&Eager, &sigma, k)?.y_hat;
        residual = residual.max(relative(&tensor::matmul(&y, &y)?, &sigma));
        oracle = oracle.max(relative(&y, &matrix_sqrt_oracle(&sigma)?));
    }
    Ok((residual, oracle))
}

fn newton_schulz_suite(report: &mut VerifyReport, cfg: &VerifyConfig, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for d in [4, 8, 16] {
        let (res, orc) = newton_schulz_errors(&mut rng, d, cfg.spd_trials, cfg.ns_iterations)?;
        let k = cfg.ns_iterations;
        report.below(
            "newton_schulz",
            format!("residual_d{d}_k{k}"),
            res,
            SQRT_TOLERANCE,
        );
        report.below(
            "newton_schulz",
            format!("oracle_d{d}_k{k}"),
            orc,
            SQRT_TOLERANCE,
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Jensen–Shannon
// ---------------------------------------------------------------------------

fn random_distribution(
    rng: &mut ChaCha8Rng,
    w: usize,
    h: usize,
) -> Result<crate::loss::HeatmapDistribution> {
    // A mix of dense and sparse maps so the upper bound is approached.
    let sparsity = rng.random_range(0.0..0.95);
    let values = (0..w * h)
        .map(|_| {
            if rng.random_bool(sparsity) {
                0.0
            } else {
                rng.random_range(0.0..1.0)
            }
        })
        .collect();
    Ok(normalize_to_distribution(&Heatmap::new(
        w,
        h,
        values,
        HeatmapKind::Landmark,
    )?))
}

fn js_suite(report: &mut VerifyReport, cfg: &VerifyConfig, seed: u64) -> Result<()> {
    const S: &str = "js";
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let (mut asym, mut neg, mut over, mut self_js) = (0.0f64, 0.0f64, f64::NEG_INFINITY, 0.0f64);
    for _ in 0..cfg.js_pairs {
        let p = random_distribution(&mut rng, 8, 8)?;
        let q = random_distribution(&mut rng, 8, 8)?;
        let (pq, qp) = (js_divergence(&p, &q)?, js_divergence(&q, &p)?);
        asym = asym.max((pq - qp).abs());
        neg = neg.max(-pq);
        over = over.max(pq - std::f64::consts::LN_2);
        self_js = self_js.max(js_divergence(&p, &p)?.abs());
    }
    report.below(S, "symmetry", asym, 1e-12);
    report.at_most(S, "nonnegative", neg, 0.0);
    report.at_most(S, "upper_bound_ln2", over, 1e-9);
    report.below(S, "zero_on_equal", self_js, 1e-9);
    Ok(())
}

// ---------------------------------------------------------------------------
// Search
// ---------------------------------------------------------------------------

/// Encodes an integral landmark on a straight boundary through it and
/// returns the pixel error of searching the ground-truth fused maps.
fn ground_truth_search_error(rng: &mut ChaCha8Rng, size: usize, cfg: &SearchConfig) -> Result<f64> {
    let u = rng.random_range(2..size - 2);
    let v = rng.random_range(2..size - 2);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let (dx, dy) = (theta.cos() * 6.0, theta.sin() * 6.0);
    let pts = [
        [u as f64 - dx, v as f64 - dy],
        [u as f64, v as f64],
        [u as f64 + dx, v as f64 + dy],
    ];
    let dist = boundary_distance(&pts, size, size)?;
    let b = encode_boundary_heatmap(&dist, SIGMA2, XI, BoundaryProfile::Linear)?;
    let h = encode_landmark_heatmap([u as f64, v as f64], SIGMA1, size, size)?;
    let g_tilde = decode_argmax(&h)?;
    let hit = search_optimal(&h, &b, g_tilde, cfg)?;
    Ok((hit.point.0 as f64 - u as f64).hypot(hit.point.1 as f64 - v as f64))
}

fn search_suite(report: &mut VerifyReport, cfg: &VerifyConfig, seed: u64) -> Result<()> {
    const S: &str = "search";
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let search = SearchConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        worst = worst.max(ground_truth_search_error(&mut rng, 32, &search)?);
    }
    report.at_most(S, "ground_truth_recovery", worst, 0.0);

    let out = run_corrupted_suite(&mut rng, cfg.search_trials, 32, &search)?;
    report.at_most(
        S,
        "corrupted_search_minus_argmax",
        out.search_error - out.argmax_error,
        0.0,
    );

    let degenerate = SearchConfig {
        window: 1,
        ..search
    };
    let out = run_corrupted_suite(&mut rng, 100, 32, &degenerate)?;
    report.at_most(
        S,
        "window1_equals_argmax",
        (out.search_error - out.argmax_error).abs(),
        0.0,
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        assert_eq!(
            "newton-schulz".parse::<Suite>().unwrap(),
            Suite::NewtonSchulz
        );
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn js_suite_passes() {
        let r = run(Suite::Js, &VerifyConfig::default(), 0).unwrap();
        assert_eq!(r.checks.len(), 4);
        assert!(r.passed(), "{:?}", r.failures().collect::<Vec<_>>());
    }

    #[test]
    fn single_iteration_fails_tolerance() {
        let cfg = VerifyConfig {
            ns_iterations: 1,
            spd_trials: 5,
            ..Default::default()
        };
        let r = run(Suite::NewtonSchulz, &cfg, 0).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn report_round_trips() {
        let mut r = VerifyReport::default();
        r.below("x", "y", 0.5, 1.0);
        r.below("x", "z", 2.0, 1.0);
        assert!(!r.passed());
        assert_eq!(r.failures().count(), 1);
        let back: VerifyReport = toml::from_str(&r.to_toml()).unwrap();
        assert_eq!(back, r);
        assert!(r.checks[0].to_string().starts_with("PASS x/y"));
    }
}
