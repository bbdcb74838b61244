//! Alternating optimization: search optimal landmarks with the weights fixed,
//! then take a momentum step on the heatmap loss with those landmarks fixed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::synth::{synthesize_sample, SubsetLayout};
use super::{ForwardOutput, NetworkConfig, NetworkState, Variant};
use crate::autodiff::Graph;
use crate::backend::{Backend, Eager};
use crate::data::{crop_and_resize, AnnotationRecord, Image};
use crate::error::{Error, Result};
use crate::heatmap::{
    decode_argmax, encode_targets, BoundaryScheme, EncodeConfig, Heatmap, HeatmapKind,
};
use crate::landmarks::{LandmarkSet, Scheme};
use crate::loss::{consistency_to_target, js_to_target, normalize_to_distribution};
use crate::metrics::{mean_point_error, EyeReference};
use crate::search::{decode_with_search, SearchConfig};
use crate::tensor::Tensor;

pub const REFERENCE_BASE_LR: f64 = 2.5e-4;
/// Run length the staircase breakpoints are stated for.
pub const REFERENCE_ITERATIONS: u64 = 100_000;
const STAIRCASE: [(u64, f64); 3] = [(5_000, 5.0), (20_000, 2.0), (50_000, 2.0)];

/// Piecewise-constant learning rate. Breakpoints sit at 5%, 20% and 50% of
/// `total_iterations`; the rate is divided by 5, 2 and 2 at each.
pub fn staircase_lr(iteration: u64, base_lr: f64, total_iterations: u64) -> f64 {
    let mut lr = base_lr;
    for (at, div) in STAIRCASE {
        if iteration >= staircase_breakpoint(at, total_iterations) {
            lr /= div;
        }
    }
    lr
}

fn staircase_breakpoint(at: u64, total: u64) -> u64 {
    ((at as u128 * total as u128) / REFERENCE_ITERATIONS as u128) as u64
}

/// The three breakpoints for a run of `total_iterations`.
pub fn staircase_breakpoints(total_iterations: u64) -> [u64; 3] {
    STAIRCASE.map(|(at, _)| staircase_breakpoint(at, total_iterations))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Length the staircase is scaled to; 0 means `iterations`.
    pub schedule_iterations: u64,
    pub momentum: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Test-set NME is logged every this many iterations; 0 logs only the
    /// first and last.
    pub eval_every: u64,
    /// Fraction of the schedule over which the consistency weight ramps
    /// linearly from 0 to `search.eta`; 0 applies it from the start.
    pub consistency_warmup: f64,
    /// Taken from the run's `[search]` table rather than stored here.
    #[serde(skip)]
    pub search: SearchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            batch_size: 4,
            base_lr: 0.1,
            schedule_iterations: 0,
            momentum: 0.9,
            grad_clip: 1.0,
            train_samples: 200,
            test_samples: 50,
            eval_every: 100,
            consistency_warmup: 0.5,
            search: SearchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.search.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return Err(Error::config(format!(
                "base_lr must be finite and >= 0, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("grad_clip must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.consistency_warmup) {
            return Err(Error::config("consistency_warmup must lie in [0, 1]"));
        }
        Ok(())
    }

    fn schedule_length(&self) -> u64 {
        if self.schedule_iterations == 0 {
            self.iterations
        } else {
            self.schedule_iterations
        }
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        staircase_lr(iteration, self.base_lr, self.schedule_length())
    }

    /// Search settings with the consistency weight ramped for `iteration`.
    pub fn search_at(&self, iteration: u64) -> SearchConfig {
        let ramp = self.consistency_warmup * self.schedule_length() as f64;
        let factor = if ramp > 0.0 {
            (iteration as f64 / ramp).min(1.0)
        } else {
            1.0
        };
        SearchConfig {
            eta: self.search.eta * factor,
            ..self.search
        }
    }
}

/// One training image with its encoded targets in heatmap coordinates.
#[derive(Clone, Debug)]
pub struct TrainSample {
    /// `[input, input, 3]`.
    pub image: Tensor,
    /// Ground truth in heatmap pixels.
    pub gt: LandmarkSet,
    /// `L + T` target distributions, each `[heatmap, heatmap]`.
    pub targets: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<TrainSample>,
    /// Boundary channel of each landmark.
    pub landmark_to_boundary: Vec<usize>,
    /// Landmarks whose distance normalizes the error.
    pub eye_pair: (usize, usize),
}

fn encode_sample(
    image: Tensor,
    full: &LandmarkSet,
    boundaries: &BoundaryScheme,
    keep: &[usize],
    net: &NetworkConfig,
    encode: &EncodeConfig,
) -> Result<TrainSample> {
    let s = net.heatmap_size as f64 / net.input_size as f64;
    let full_hm = full.map(|p| [p[0] * s, p[1] * s]);
    let enc = encode_targets(
        &full_hm,
        boundaries,
        net.heatmap_size,
        net.heatmap_size,
        encode,
    )?;
    let to_target = |h: &Heatmap| {
        let d = normalize_to_distribution(h);
        Tensor::new(&[d.height, d.width], d.probabilities)
    };
    let mut targets = keep
        .iter()
        .map(|&i| to_target(&enc.landmarks[i]))
        .collect::<Result<Vec<_>>>()?;
    for b in &enc.boundaries {
        targets.push(to_target(b)?);
    }
    let gt = LandmarkSet::new(
        keep.iter().map(|&i| full_hm.points[i]).collect(),
        Scheme::from_count(keep.len()),
    )?;
    Ok(TrainSample { image, gt, targets })
}

fn check_heads(net: &NetworkConfig, landmarks: usize, boundaries: usize) -> Result<()> {
    if net.landmark_count != landmarks || net.boundary_count != boundaries {
        return Err(Error::config(format!(
            "network emits {}+{} maps but the data has {landmarks}+{boundaries}",
            net.landmark_count, net.boundary_count
        )));
    }
    Ok(())
}

impl Dataset {
    /// `count` generated faces, sample `i` drawn from seed `seed + i`.
    pub fn synthetic(
        count: usize,
        seed: u64,
        net: &NetworkConfig,
        encode: &EncodeConfig,
    ) -> Result<Self> {
        let layout = SubsetLayout::for_count(net.landmark_count)?;
        let boundaries = BoundaryScheme::builtin(Scheme::W68)?;
        check_heads(net, layout.len(), boundaries.boundary_count())?;
        let samples = (0..count as u64)
            .into_par_iter()
            .map(|i| {
                let face = synthesize_sample(seed.wrapping_add(i), net.input_size)?;
                encode_sample(
                    face.image.to_tensor(),
                    &face.full,
                    &boundaries,
                    &layout.indices,
                    net,
                    encode,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            landmark_to_boundary: layout
                .indices
                .iter()
                .map(|&i| boundaries.landmark_to_boundary[i])
                .collect(),
            eye_pair: layout.eye_pair()?,
        })
    }

    /// Annotated images cropped to their boxes; the scheme must ship boundary
    /// and eye tables.
    pub fn from_records(
        records: &[AnnotationRecord],
        net: &NetworkConfig,
        encode: &EncodeConfig,
    ) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::contract("empty training manifest"))?;
        let scheme = first.landmarks.scheme;
        let boundaries = BoundaryScheme::builtin(scheme)?;
        let eyes = EyeReference::builtin(scheme)?;
        check_heads(net, scheme.count(), boundaries.boundary_count())?;
        let keep: Vec<usize> = (0..scheme.count()).collect();
        let samples = records
            .par_iter()
            .map(|r| {
                if r.landmarks.scheme != scheme {
                    return Err(Error::contract(format!(
                        "{}: mixed landmark schemes",
                        r.pts_path.display()
                    )));
                }
                let img = Image::load(&r.image_path)?;
                let (crop, map) = crop_and_resize(&img, &r.bbox, net.input_size)?;
                encode_sample(
                    crop.to_tensor(),
                    &map.apply_set(&r.landmarks),
                    &boundaries,
                    &keep,
                    net,
                    encode,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            landmark_to_boundary: boundaries.landmark_to_boundary.clone(),
            eye_pair: (eyes.left_corner, eyes.right_corner),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Step-1 output for one sample: argmax and searched landmark per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchTargets {
    pub g_tilde: Vec<(usize, usize)>,
    pub g_hat: Vec<(usize, usize)>,
}

/// Decodes and searches every landmark of a `[h, w, L + T]` prediction.
pub fn search_step(
    maps: &Tensor,
    landmark_to_boundary: &[usize],
    cfg: &SearchConfig,
) -> Result<SearchTargets> {
    let l = landmark_to_boundary.len();
    let mut out = SearchTargets {
        g_tilde: Vec::with_capacity(l),
        g_hat: Vec::with_capacity(l),
    };
    for (i, &t) in landmark_to_boundary.iter().enumerate() {
        let h = Heatmap::from_channel(maps, i, HeatmapKind::Landmark)?;
        let b = Heatmap::from_channel(maps, l + t, HeatmapKind::Boundary)?;
        let (g_tilde, g_hat) = decode_with_search(&h, &b, cfg)?;
        out.g_tilde.push(g_tilde);
        out.g_hat.push(g_hat);
    }
    Ok(out)
}

fn channel<B: Backend>(b: &B, maps: &B::Value, c: usize) -> Result<B::Value> {
    let s = b.shape(maps);
    b.reshape(&b.slice_channels(maps, c, 1)?, &[s[0], s[1]])
}

/// 1 inside the search window around `center`, 0 elsewhere.
fn window_mask(center: (usize, usize), window: usize, w: usize, h: usize) -> Tensor {
    let r = window / 2;
    let (x0, x1) = (center.0.saturating_sub(r), (center.0 + r).min(w - 1));
    let (y0, y1) = (center.1.saturating_sub(r), (center.1 + r).min(h - 1));
    let data = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            if (x0..=x1).contains(&x) && (y0..=y1).contains(&y) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(&[h, w], data).expect("mask shape")
}

/// JS loss of every head against the targets plus the consistency term of
/// the final head. The consistency position is the probability-weighted mean
/// inside the search window around `g̃`.
pub fn loss_from_outputs<B: Backend>(
    b: &B,
    out: &ForwardOutput<B::Value>,
    sample: &TrainSample,
    search: &SearchTargets,
    cfg: &SearchConfig,
) -> Result<B::Value> {
    let mut terms = Vec::new();
    for maps in &out.stacks {
        let c = b.shape(maps)[2];
        if c != sample.targets.len() {
            return Err(Error::dim("loss targets", &[c], &[sample.targets.len()]));
        }
        for (i, target) in sample.targets.iter().enumerate() {
            terms.push(js_to_target(b, &channel(b, maps, i)?, target)?);
        }
    }
    if cfg.eta > 0.0 {
        let last = out.stacks.last().expect("one head");
        let s = b.shape(last);
        for (i, (&g_tilde, &g_hat)) in search.g_tilde.iter().zip(&search.g_hat).enumerate() {
            let mask = b.constant(window_mask(g_tilde, cfg.window, s[1], s[0]));
            let local = b.mul(&channel(b, last, i)?, &mask)?;
            terms.push(consistency_to_target(
                b,
                &local,
                [g_hat.0 as f64, g_hat.1 as f64],
                cfg,
            )?);
        }
    }
    let mut total = terms
        .pop()
        .ok_or_else(|| Error::contract("no loss terms"))?;
    for t in terms.iter().rev() {
        total = b.add(&total, t)?;
    }
    Ok(total)
}

struct SampleGrad {
    loss: f64,
    grads: Vec<Tensor>,
}

fn sample_gradient(
    state: &NetworkState,
    sample: &TrainSample,
    landmark_to_boundary: &[usize],
    cfg: &SearchConfig,
) -> Result<SampleGrad> {
    let g = Graph::new();
    let params = state.bind(&g);
    let x = g.constant(sample.image.clone());
    let out = state.forward(&g, &params, &x, Variant::Full, None)?;
    let last = g.value(out.stacks.last().expect("one head"));
    // The forward pass doubles as step 1: the weights are the same.
    let search = search_step(&last, landmark_to_boundary, cfg)?;
    let loss = loss_from_outputs(&g, &out, sample, &search, cfg)?;
    let value = g.value(&loss).item();
    if !value.is_finite() {
        return Ok(SampleGrad {
            loss: value,
            grads: Vec::new(),
        });
    }
    g.backward(loss)?;
    let grads = params
        .iter()
        .zip(&state.params)
        .map(|(v, p)| {
            g.grad(*v)
                .unwrap_or_else(|| Tensor::zeros(p.tensor.shape()))
        })
        .collect();
    Ok(SampleGrad { loss: value, grads })
}

fn first_non_finite(state: &NetworkState, grads: Option<&[Tensor]>) -> String {
    if let Some(p) = state.params.iter().find(|p| !p.tensor.is_finite()) {
        return format!("parameter {}", p.name);
    }
    if let Some(grads) = grads {
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return format!("gradient of {}", state.params[i].name);
        }
    }
    "loss".into()
}

/// One momentum step on a batch; returns the mean pre-update loss. `search`
/// supplies the window and consistency weight for this step.
pub fn train_step(
    state: &mut NetworkState,
    batch: &[&TrainSample],
    landmark_to_boundary: &[usize],
    cfg: &TrainConfig,
    search: &SearchConfig,
    lr: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let snapshot = &*state;
    let results = batch
        .par_iter()
        .map(|s| sample_gradient(snapshot, s, landmark_to_boundary, search))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| match e {
            Error::NonFinite(msg) => {
                Error::NonFinite(format!("iteration {}: {msg}", snapshot.iteration))
            }
            other => other,
        })?;
    let n = batch.len() as f64;
    let loss = results.iter().map(|r| r.loss).sum::<f64>() / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "iteration {}: loss {loss}; first non-finite tensor: {}",
            state.iteration,
            first_non_finite(state, None)
        )));
    }
    let mut grads = results[0].grads.clone();
    for r in &results[1..] {
        for (acc, g) in grads.iter_mut().zip(&r.grads) {
            acc.add_assign(g)?;
        }
    }
    let mut sq = 0.0;
    for g in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|v| *v /= n);
        sq += g.data().iter().map(|v| v * v).sum::<f64>();
    }
    if !sq.is_finite() {
        return Err(Error::NonFinite(format!(
            "iteration {}: {}",
            state.iteration,
            first_non_finite(state, Some(&grads))
        )));
    }
    let clip = if cfg.grad_clip > 0.0 && sq.sqrt() > cfg.grad_clip {
        cfg.grad_clip / sq.sqrt()
    } else {
        1.0
    };
    for ((p, v), g) in state
        .params
        .iter_mut()
        .zip(state.velocity.iter_mut())
        .zip(&grads)
    {
        for ((w, m), d) in p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(v.data_mut())
            .zip(g.data())
        {
            *m = cfg.momentum * *m + clip * d;
            *w -= lr * *m;
        }
    }
    if state.params.iter().any(|p| !p.tensor.is_finite()) {
        return Err(Error::NonFinite(format!(
            "iteration {}: {} after update",
            state.iteration,
            first_non_finite(state, None)
        )));
    }
    state.iteration += 1;
    Ok(loss)
}

/// Logged per iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub iteration: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Runs `iterations` alternating steps from `state.iteration` on. Batches
/// depend only on `(seed, iteration)`, so a resumed run matches an
/// uninterrupted one.
pub fn alternate_optimize(
    state: &mut NetworkState,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    iterations: u64,
    observer: &mut dyn FnMut(&NetworkState, &StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("empty training set"));
    }
    let mut log = Vec::with_capacity(iterations as usize);
    for _ in 0..iterations {
        let it = state.iteration;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(it);
        let picks = rand::seq::index::sample(&mut rng, data.len(), cfg.batch_size.min(data.len()));
        let batch: Vec<&TrainSample> = picks.iter().map(|i| &data.samples[i]).collect();
        let lr = cfg.lr_at(it);
        let loss = train_step(
            state,
            &batch,
            &data.landmark_to_boundary,
            cfg,
            &cfg.search_at(it),
            lr,
        )?;
        let rec = StepRecord {
            iteration: it,
            loss,
            lr,
        };
        observer(state, &rec)?;
        log.push(rec);
    }
    Ok(log)
}

/// How landmarks are read off predicted maps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decode {
    Argmax,
    Search(SearchConfig),
}

/// Decoded landmarks of one prediction in heatmap pixels.
pub fn decode_prediction(
    maps: &Tensor,
    landmark_to_boundary: &[usize],
    decode: Decode,
) -> Result<LandmarkSet> {
    let points = match decode {
        Decode::Argmax => (0..landmark_to_boundary.len())
            .map(|i| {
                let (x, y) = decode_argmax(
                    &Heatmap::from_channel(maps, i, HeatmapKind::Landmark)?.clamped(),
                )?;
                Ok([x as f64, y as f64])
            })
            .collect::<Result<Vec<_>>>()?,
        Decode::Search(cfg) => search_step(maps, landmark_to_boundary, &cfg)?
            .g_hat
            .iter()
            .map(|&(x, y)| [x as f64, y as f64])
            .collect(),
    };
    LandmarkSet::from_points(points)
}

/// Per-sample error normalized by the distance between the eye pair.
pub fn evaluate(state: &NetworkState, data: &Dataset, decode: Decode) -> Result<Vec<f64>> {
    let params = state.bind(&Eager);
    data.samples
        .par_iter()
        .map(|s| {
            let out = state.forward(&Eager, &params, &s.image, Variant::Full, None)?;
            let pred = decode_prediction(
                out.stacks.last().expect("one head"),
                &data.landmark_to_boundary,
                decode,
            )?;
            let (a, b) = data.eye_pair;
            let d = (s.gt.points[a][0] - s.gt.points[b][0])
                .hypot(s.gt.points[a][1] - s.gt.points[b][1]);
            if !(d > 0.0) {
                return Err(Error::contract("zero normalization length"));
            }
            let gt = LandmarkSet::from_points(s.gt.points.clone())?;
            Ok(mean_point_error(&pred, &gt) / d)
        })
        .collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
