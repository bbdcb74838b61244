//! Windowed search for the optimal landmark around an initial estimate.
//!
//! Every pixel `ĝ` in a window centered on `g̃` is scored by
//! `exp(−‖g̃−ĝ‖²/(2σ₃²)) + p_H(ĝ)·p_B(ĝ)` and the best one wins. How the
//! probabilities are normalized is set by [`ProbabilityNorm`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{
    decode_argmax, distance_transform, encode_boundary_heatmap, encode_landmark_heatmap, rasterize,
};
use crate::heatmap::{BoundaryProfile, Heatmap, HeatmapKind, SIGMA1, SIGMA2, XI};
use crate::loss::normalize_to_distribution;

/// How `p_H` and `p_B` are obtained from the clamped heatmaps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbabilityNorm {
    /// Each map is normalized over the search window and multiplied by the
    /// window's pixel count, so a flat window scores 1 everywhere and the
    /// probability term is on the same scale as the distance term.
    #[default]
    Window,
    /// Each map is normalized over the full frame.
    FullMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub window: usize,
    pub sigma3: f64,
    pub eta: f64,
    pub normalization: ProbabilityNorm,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            window: 7,
            sigma3: 4.0,
            eta: 10.0,
            normalization: ProbabilityNorm::Window,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::config(format!(
                "search window must be odd and >= 1, got {}",
                self.window
            )));
        }
        if !(self.sigma3 > 0.0) || !self.sigma3.is_finite() {
            return Err(Error::config(format!(
                "sigma3 must be positive, got {}",
                self.sigma3
            )));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::config(format!(
                "eta must be non-negative, got {}",
                self.eta
            )));
        }
        Ok(())
    }
}

/// Clipped window `[x0, x1) × [y0, y1)` centered on `center`.
fn window_bounds(
    center: (usize, usize),
    window: usize,
    width: usize,
    height: usize,
) -> (usize, usize, usize, usize) {
    let r = window / 2;
    (
        center.0.saturating_sub(r),
        (center.0 + r + 1).min(width),
        center.1.saturating_sub(r),
        (center.1 + r + 1).min(height),
    )
}

/// Probability term over the window, row-major within the window.
fn probability_term(
    h: &Heatmap,
    b: &Heatmap,
    bounds: (usize, usize, usize, usize),
    norm: ProbabilityNorm,
) -> Vec<f64> {
    let (x0, x1, y0, y1) = bounds;
    let pick = |m: &Heatmap| -> Vec<f64> {
        (y0..y1)
            .flat_map(|y| (x0..x1).map(move |x| (x, y)))
            .map(|(x, y)| m.get(x, y).clamp(0.0, 1.0).max(crate::backend::LOG_FLOOR))
            .collect()
    };
    match norm {
        ProbabilityNorm::Window => {
            let (wh, wb) = (pick(h), pick(b));
            let n = wh.len() as f64;
            let (sh, sb): (f64, f64) = (wh.iter().sum(), wb.iter().sum());
            wh.iter()
                .zip(&wb)
                .map(|(p, q)| (n * p / sh) * (n * q / sb))
                .collect()
        }
        ProbabilityNorm::FullMap => {
            let ph = normalize_to_distribution(&h.clamped());
            let pb = normalize_to_distribution(&b.clamped());
            (y0..y1)
                .flat_map(|y| (x0..x1).map(move |x| (x, y)))
                .map(|(x, y)| ph.get(x, y) * pb.get(x, y))
                .collect()
        }
    }
}

/// Search result with the winning score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchHit {
    pub point: (usize, usize),
    pub score: f64,
}

/// Best pixel around `g_tilde` for landmark map `h` and its boundary map `b`.
///
/// Ties go to the pixel nearest `g_tilde`, then to the first in row-major
/// order.
pub fn search_optimal(
    h: &Heatmap,
    b: &Heatmap,
    g_tilde: (usize, usize),
    cfg: &SearchConfig,
) -> Result<SearchHit> {
    cfg.validate()?;
    if h.width != b.width || h.height != b.height {
        return Err(Error::dim(
            "search_optimal",
            &[h.height, h.width],
            &[b.height, b.width],
        ));
    }
    if g_tilde.0 >= h.width || g_tilde.1 >= h.height {
        return Err(Error::contract(format!(
            "search center {g_tilde:?} outside {}×{}",
            h.width, h.height
        )));
    }
    let bounds = window_bounds(g_tilde, cfg.window, h.width, h.height);
    let prob = probability_term(h, b, bounds, cfg.normalization);
    let (x0, x1, y0, y1) = bounds;
    let denom = 2.0 * cfg.sigma3 * cfg.sigma3;
    let mut best: Option<(f64, usize, (usize, usize))> = None;
    for (i, (x, y)) in (y0..y1)
        .flat_map(|y| (x0..x1).map(move |x| (x, y)))
        .enumerate()
    {
        let d2 = (x as f64 - g_tilde.0 as f64).powi(2) + (y as f64 - g_tilde.1 as f64).powi(2);
        let score = (-d2 / denom).exp() + prob[i];
        let d2 = d2 as usize;
        let better = match best {
            None => true,
            Some((s, d, _)) => score > s || (score == s && d2 < d),
        };
        if better {
            best = Some((score, d2, (x, y)));
        }
    }
    let (score, _, point) = best.expect("window contains its center");
    Ok(SearchHit { point, score })
}

/// Plain argmax of `h` followed by [`search_optimal`] around it.
pub fn decode_with_search(
    h: &Heatmap,
    b: &Heatmap,
    cfg: &SearchConfig,
) -> Result<((usize, usize), (usize, usize))> {
    let g_tilde = decode_argmax(&h.clamped())?;
    Ok((g_tilde, search_optimal(h, b, g_tilde, cfg)?.point))
}

// ---------------------------------------------------------------------------
// Corrupted-heatmap suite
// ---------------------------------------------------------------------------

/// Amplitude kept at the true peak.
pub const CORRUPT_KEEP: f64 = 0.5;
/// Perpendicular offset of the spurious peak from the boundary, pixels.
pub const CORRUPT_OFFSET: f64 = 5.0;
/// Amplitude of the spurious peak.
pub const CORRUPT_AMPLITUDE: f64 = 1.0;

/// `min(1, keep·G(true) + amplitude·G(true + offset·normal))`.
pub fn corrupt_landmark_heatmap(
    truth: [f64; 2],
    normal: [f64; 2],
    sigma1: f64,
    width: usize,
    height: usize,
) -> Result<Heatmap> {
    let len = normal[0].hypot(normal[1]);
    if !(len > 0.0) {
        return Err(Error::contract("corruption direction must be non-zero"));
    }
    let n = [normal[0] / len, normal[1] / len];
    let spurious = [
        truth[0] + CORRUPT_OFFSET * n[0],
        truth[1] + CORRUPT_OFFSET * n[1],
    ];
    let a = encode_landmark_heatmap(truth, sigma1, width, height)?;
    let b = encode_landmark_heatmap(spurious, sigma1, width, height)?;
    let values = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(p, q)| (CORRUPT_KEEP * p + CORRUPT_AMPLITUDE * q).min(1.0))
        .collect();
    Heatmap::new(width, height, values, HeatmapKind::Landmark)
}

/// One trial: a straight boundary through an integral landmark at a random
/// angle, its boundary heatmap, and the corrupted landmark heatmap.
pub struct CorruptedTrial {
    pub truth: (usize, usize),
    pub landmark: Heatmap,
    pub boundary: Heatmap,
}

pub fn corrupted_trial(rng: &mut impl Rng, size: usize) -> Result<CorruptedTrial> {
    let margin = size as f64 * 0.3;
    let u = rng.random_range(margin..size as f64 - margin).round();
    let v = rng.random_range(margin..size as f64 - margin).round();
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let dir = [theta.cos(), theta.sin()];
    let half = size as f64 * 0.4;
    let ends = [
        [u - half * dir[0], v - half * dir[1]],
        [u + half * dir[0], v + half * dir[1]],
    ];
    let dense = crate::heatmap::interpolate_boundary(&ends)?;
    let dist = distance_transform(&rasterize(&dense, size, size), size, size)?;
    let boundary = encode_boundary_heatmap(&dist, SIGMA2, XI, BoundaryProfile::Linear)?;
    let landmark = corrupt_landmark_heatmap([u, v], [-dir[1], dir[0]], SIGMA1, size, size)?;
    Ok(CorruptedTrial {
        truth: (u as usize, v as usize),
        landmark,
        boundary,
    })
}

/// Mean pixel errors of plain argmax and of search decoding over `trials`
/// corrupted trials.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteOutcome {
    pub trials: usize,
    pub argmax_error: f64,
    pub search_error: f64,
    pub search_worse: usize,
}

pub fn run_corrupted_suite(
    rng: &mut impl Rng,
    trials: usize,
    size: usize,
    cfg: &SearchConfig,
) -> Result<SuiteOutcome> {
    let err = |p: (usize, usize), t: (usize, usize)| {
        (p.0 as f64 - t.0 as f64).hypot(p.1 as f64 - t.1 as f64)
    };
    let (mut ea, mut es, mut worse) = (0.0, 0.0, 0);
    for _ in 0..trials {
        let trial = corrupted_trial(rng, size)?;
        let (g_tilde, g_hat) = decode_with_search(&trial.landmark, &trial.boundary, cfg)?;
        let (a, s) = (err(g_tilde, trial.truth), err(g_hat, trial.truth));
        ea += a;
        es += s;
        worse += usize::from(s > a);
    }
    let n = trials.max(1) as f64;
    Ok(SuiteOutcome {
        trials,
        argmax_error: ea / n,
        search_error: es / n,
        search_worse: worse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::{boundary_distance, fuse_boundary_adaptive, BoundaryScheme};
    use crate::landmarks::Scheme;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn truth_maps(peak: [f64; 2]) -> (Heatmap, Heatmap) {
        let h = encode_landmark_heatmap(peak, 3.0, 32, 32).unwrap();
        let line = [[4.0, peak[1]], [28.0, peak[1]]];
        let d = boundary_distance(&line, 32, 32).unwrap();
        (
            h,
            encode_boundary_heatmap(&d, 3.0, XI, BoundaryProfile::Linear).unwrap(),
        )
    }

    /// Direct evaluation of the score at every window pixel.
    fn brute(h: &Heatmap, b: &Heatmap, g: (usize, usize), cfg: &SearchConfig) -> (usize, usize) {
        let r = (cfg.window / 2) as i64;
        let mut cands = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (g.0 as i64 + dx, g.1 as i64 + dy);
                if x >= 0 && y >= 0 && x < h.width as i64 && y < h.height as i64 {
                    cands.push((x as usize, y as usize));
                }
            }
        }
        let n = cands.len() as f64;
        let sh: f64 = cands
            .iter()
            .map(|&(x, y)| h.get(x, y).clamp(1e-12, 1.0))
            .sum();
        let sb: f64 = cands
            .iter()
            .map(|&(x, y)| b.get(x, y).clamp(1e-12, 1.0))
            .sum();
        let mut best = cands[0];
        let mut best_key = (f64::NEG_INFINITY, 0i64);
        for &(x, y) in &cands {
            let d2 = ((x as i64 - g.0 as i64).pow(2) + (y as i64 - g.1 as i64).pow(2)) as f64;
            let s = (-d2 / (2.0 * cfg.sigma3 * cfg.sigma3)).exp()
                + n * h.get(x, y).clamp(1e-12, 1.0) / sh * n * b.get(x, y).clamp(1e-12, 1.0) / sb;
            if s > best_key.0 || (s == best_key.0 && -(d2 as i64) > best_key.1) {
                best_key = (s, -(d2 as i64));
                best = (x, y);
            }
        }
        best
    }

    #[test]
    fn peak_is_fixed_point() {
        let (h, b) = truth_maps([16.0, 16.0]);
        let hit = search_optimal(&h, &b, (16, 16), &SearchConfig::default()).unwrap();
        assert_eq!(hit.point, (16, 16));
    }

    #[test]
    fn flat_probabilities_return_center() {
        let flat = Heatmap::filled(16, 16, 0.3, HeatmapKind::Landmark);
        for norm in [ProbabilityNorm::Window, ProbabilityNorm::FullMap] {
            let cfg = SearchConfig {
                normalization: norm,
                ..SearchConfig::default()
            };
            assert_eq!(
                search_optimal(&flat, &flat, (7, 9), &cfg).unwrap().point,
                (7, 9)
            );
        }
    }

    #[test]
    fn displaced_start_recovers_peak() {
        let (h, b) = truth_maps([16.0, 16.0]);
        let cfg = SearchConfig::default();
        for g in [(18, 16), (14, 16), (16, 18), (16, 14), (18, 18)] {
            let hit = search_optimal(&h, &b, g, &cfg).unwrap();
            assert_eq!(hit.point, (16, 16), "from {g:?}");
            assert_eq!(hit.point, brute(&h, &b, g, &cfg));
        }
    }

    #[test]
    fn unit_window_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let cfg = SearchConfig {
            window: 1,
            ..SearchConfig::default()
        };
        for _ in 0..20 {
            let t = corrupted_trial(&mut rng, 32).unwrap();
            let g = (rng.random_range(0..32), rng.random_range(0..32));
            assert_eq!(
                search_optimal(&t.landmark, &t.boundary, g, &cfg)
                    .unwrap()
                    .point,
                g
            );
        }
    }

    #[test]
    fn full_map_score_monotone_in_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for _ in 0..20 {
            let t = corrupted_trial(&mut rng, 32).unwrap();
            let g = (rng.random_range(0..32), rng.random_range(0..32));
            let mut last = f64::NEG_INFINITY;
            for window in [1, 3, 5, 7, 9] {
                let cfg = SearchConfig {
                    window,
                    normalization: ProbabilityNorm::FullMap,
                    ..SearchConfig::default()
                };
                let s = search_optimal(&t.landmark, &t.boundary, g, &cfg)
                    .unwrap()
                    .score;
                assert!(s >= last);
                last = s;
            }
        }
    }

    #[test]
    fn corrupted_suite_favors_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let out = run_corrupted_suite(&mut rng, 100, 32, &SearchConfig::default()).unwrap();
        assert!(out.search_error < out.argmax_error, "{out:?}");
    }

    #[test]
    fn ground_truth_fused_argmax_is_landmark() {
        let scheme = BoundaryScheme::builtin(Scheme::W68).unwrap();
        let (h, b) = truth_maps([12.0, 20.0]);
        let fused = fuse_boundary_adaptive(&h, &b, 0, 0, &scheme).unwrap();
        assert_eq!(decode_argmax(&fused).unwrap(), (12, 20));
    }

    #[test]
    fn config_validation() {
        let bad = SearchConfig {
            window: 4,
            ..SearchConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
