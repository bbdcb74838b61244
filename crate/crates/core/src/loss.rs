//! Heatmap divergences and the combined training objective.
//!
//! Heatmaps are compared as probability distributions over pixels: values
//! are floored at [`LOG_FLOOR`] and divided by their total. The objective is
//! the sum of Jensen–Shannon divergences over landmark and boundary maps plus
//! `η·‖g̃ − ĝ‖²/(2σ₃²)` per landmark.

use crate::backend::{Backend, LOG_FLOOR};
use crate::error::{Error, Result};
use crate::heatmap::Heatmap;
use crate::landmarks::{dist2, LandmarkSet};
use crate::search::SearchConfig;
use crate::tensor::Tensor;

/// Pixel probabilities of a heatmap.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapDistribution {
    pub width: usize,
    pub height: usize,
    pub probabilities: Vec<f64>,
    /// No pixel exceeded the floor; the distribution is uniform.
    pub degenerate: bool,
}

impl HeatmapDistribution {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.probabilities[y * self.width + x]
    }
}

fn floored_total(values: &[f64]) -> (Vec<f64>, f64) {
    let floored: Vec<f64> = values.iter().map(|v| v.max(LOG_FLOOR)).collect();
    let total = floored.iter().sum();
    (floored, total)
}

pub fn normalize_to_distribution(h: &Heatmap) -> HeatmapDistribution {
    let (floored, total) = floored_total(&h.values);
    HeatmapDistribution {
        width: h.width,
        height: h.height,
        probabilities: floored.iter().map(|v| v / total).collect(),
        degenerate: !h.values.iter().any(|&v| v > LOG_FLOOR),
    }
}

fn same_shape(p: &HeatmapDistribution, q: &HeatmapDistribution, op: &'static str) -> Result<()> {
    if p.width != q.width || p.height != q.height {
        return Err(Error::dim(op, &[p.height, p.width], &[q.height, q.width]));
    }
    Ok(())
}

fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let (a, b) = (a.max(LOG_FLOOR), b.max(LOG_FLOOR));
            a * (a.ln() - b.ln())
        })
        .sum()
}

/// `Σ p·ln(p/q)` with both arguments floored.
pub fn kl_divergence(p: &HeatmapDistribution, q: &HeatmapDistribution) -> Result<f64> {
    same_shape(p, q, "kl_divergence")?;
    Ok(kl_raw(&p.probabilities, &q.probabilities))
}

/// `½KL(p‖m) + ½KL(q‖m)` with `m = (p+q)/2`.
pub fn js_divergence(p: &HeatmapDistribution, q: &HeatmapDistribution) -> Result<f64> {
    same_shape(p, q, "js_divergence")?;
    let m: Vec<f64> = p
        .probabilities
        .iter()
        .zip(&q.probabilities)
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    Ok(0.5 * kl_raw(&p.probabilities, &m) + 0.5 * kl_raw(&q.probabilities, &m))
}

/// Sum of pairwise JS divergences between aligned lists.
pub fn heatmap_set_loss(pred: &[Heatmap], gt: &[Heatmap]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::contract(format!(
            "{} predicted maps vs {} targets",
            pred.len(),
            gt.len()
        )));
    }
    pred.iter()
        .zip(gt)
        .map(|(p, g)| js_divergence(&normalize_to_distribution(p), &normalize_to_distribution(g)))
        .sum()
}

fn check_sets(a: &LandmarkSet, b: &LandmarkSet) -> Result<()> {
    if a.scheme != b.scheme || a.len() != b.len() {
        return Err(Error::contract(format!(
            "landmark schemes differ: {} vs {}",
            a.scheme, b.scheme
        )));
    }
    Ok(())
}

/// `η · Σ_ℓ ‖g̃ℓ − ĝℓ‖² / (2σ₃²)`.
pub fn consistency_term(
    g_tilde: &LandmarkSet,
    g_hat: &LandmarkSet,
    cfg: &SearchConfig,
) -> Result<f64> {
    check_sets(g_tilde, g_hat)?;
    let sq: f64 = g_tilde
        .points
        .iter()
        .zip(&g_hat.points)
        .map(|(&a, &b)| dist2(a, b))
        .sum();
    Ok(cfg.eta * sq / (2.0 * cfg.sigma3 * cfg.sigma3))
}

/// Boundary JS sum + landmark JS sum + consistency term.
pub fn total_loss(
    pred_landmark: &[Heatmap],
    pred_boundary: &[Heatmap],
    gt_landmark: &[Heatmap],
    gt_boundary: &[Heatmap],
    g_tilde: &LandmarkSet,
    g_hat: &LandmarkSet,
    cfg: &SearchConfig,
) -> Result<f64> {
    if pred_landmark.len() != g_tilde.len() {
        return Err(Error::contract(format!(
            "{} landmark maps for {} landmarks",
            pred_landmark.len(),
            g_tilde.len()
        )));
    }
    Ok(heatmap_set_loss(pred_boundary, gt_boundary)?
        + heatmap_set_loss(pred_landmark, gt_landmark)?
        + consistency_term(g_tilde, g_hat, cfg)?)
}

// ---------------------------------------------------------------------------
// Differentiable forms
// ---------------------------------------------------------------------------

/// Floors a map at [`LOG_FLOOR`] and divides by its total.
pub fn distribution<B: Backend>(b: &B, map: &B::Value) -> Result<B::Value> {
    let floored = b.clamp_min(map, LOG_FLOOR);
    let total = b.sum(&floored);
    b.mul_scalar(&floored, &b.recip(&total))
}

fn kl_terms<B: Backend>(b: &B, p: &B::Value, m: &B::Value) -> Result<B::Value> {
    let diff = b.sub(&b.ln(p), &b.ln(m))?;
    Ok(b.sum(&b.mul(p, &diff)?))
}

/// JS divergence between a predicted map (any scale) and a fixed target
/// distribution of the same shape.
pub fn js_to_target<B: Backend>(b: &B, pred: &B::Value, target: &Tensor) -> Result<B::Value> {
    let p = distribution(b, pred)?;
    if b.shape(&p) != target.shape() {
        return Err(Error::dim("js_to_target", &b.shape(&p), target.shape()));
    }
    let q = b.constant(target.clone());
    let m = b.scale(&b.add(&p, &q)?, 0.5);
    let js = b.add(&kl_terms(b, &p, &m)?, &kl_terms(b, &q, &m)?)?;
    Ok(b.scale(&js, 0.5))
}

/// Probability-weighted mean pixel position `(x, y)` of a `[H, W]` map.
pub fn soft_argmax<B: Backend>(b: &B, map: &B::Value) -> Result<(B::Value, B::Value)> {
    let shape = b.shape(map);
    if shape.len() != 2 {
        return Err(Error::dim("soft_argmax", &shape, &[0, 0]));
    }
    let (h, w) = (shape[0], shape[1]);
    let p = distribution(b, map)?;
    let xs = Tensor::new(&[h, w], (0..h * w).map(|i| (i % w) as f64).collect())?;
    let ys = Tensor::new(&[h, w], (0..h * w).map(|i| (i / w) as f64).collect())?;
    let x = b.sum(&b.mul(&p, &b.constant(xs))?);
    let y = b.sum(&b.mul(&p, &b.constant(ys))?);
    Ok((x, y))
}

/// `η·‖g̃ − ĝ‖²/(2σ₃²)` for one landmark with `g̃` the soft-argmax of `map`
/// and `ĝ` held fixed.
pub fn consistency_to_target<B: Backend>(
    b: &B,
    map: &B::Value,
    g_hat: [f64; 2],
    cfg: &SearchConfig,
) -> Result<B::Value> {
    let (x, y) = soft_argmax(b, map)?;
    let dx = b.add_scalar(&x, -g_hat[0]);
    let dy = b.add_scalar(&y, -g_hat[1]);
    let sq = b.add(&b.mul(&dx, &dx)?, &b.mul(&dy, &dy)?)?;
    Ok(b.scale(&sq, cfg.eta / (2.0 * cfg.sigma3 * cfg.sigma3)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::backend::Eager;
    use crate::gradcheck::finite_diff_check;
    use crate::heatmap::HeatmapKind;
    use crate::landmarks::Scheme;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(values: Vec<f64>, w: usize) -> Heatmap {
        let h = values.len() / w;
        Heatmap::new(w, h, values, HeatmapKind::Landmark).unwrap()
    }

    fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Heatmap {
        map((0..w * h).map(|_| rng.random_range(0.0..1.0)).collect(), w)
    }

    fn sum_kl(p: &[f64], q: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..p.len() {
            acc += p[i] * (p[i].max(1e-12) / q[i].max(1e-12)).ln();
        }
        acc
    }

    #[test]
    fn distribution_cases() {
        let d = normalize_to_distribution(&map(vec![0.0, 1.0, 0.0, 0.0], 2));
        assert!((d.probabilities[1] - 1.0).abs() < 1e-11);
        assert!(!d.degenerate);
        let u = normalize_to_distribution(&map(vec![0.3; 4], 2));
        assert!(u.probabilities.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let z = normalize_to_distribution(&map(vec![0.0; 4], 2));
        assert!(z.degenerate);
        assert!(z.probabilities.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let r = normalize_to_distribution(&random_map(&mut rng, 8, 8));
        assert!((r.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_and_js_closed_forms() {
        let p = normalize_to_distribution(&map(vec![1.0, 0.0], 2));
        let q = normalize_to_distribution(&map(vec![0.5, 0.5], 2));
        let r = normalize_to_distribution(&map(vec![0.0, 1.0], 2));
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        assert!((kl_divergence(&p, &q).unwrap() - 2f64.ln()).abs() < 1e-9);
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        assert!((js_divergence(&p, &r).unwrap() - 2f64.ln()).abs() < 1e-9);
        let wide = normalize_to_distribution(&map(vec![1.0; 3], 3));
        assert!(matches!(
            kl_divergence(&p, &wide),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn js_matches_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let p = normalize_to_distribution(&random_map(&mut rng, 5, 5));
        let q = normalize_to_distribution(&random_map(&mut rng, 5, 5));
        let m: Vec<f64> = (0..25)
            .map(|i| 0.5 * (p.probabilities[i] + q.probabilities[i]))
            .collect();
        let want = 0.5 * sum_kl(&p.probabilities, &m) + 0.5 * sum_kl(&q.probabilities, &m);
        assert!((js_divergence(&p, &q).unwrap() - want).abs() < 1e-10);
        assert!(
            (kl_divergence(&p, &q).unwrap() - sum_kl(&p.probabilities, &q.probabilities)).abs()
                < 1e-10
        );
    }

    #[test]
    fn set_loss_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a: Vec<Heatmap> = (0..3).map(|_| random_map(&mut rng, 4, 4)).collect();
        let b: Vec<Heatmap> = (0..3).map(|_| random_map(&mut rng, 4, 4)).collect();
        assert_eq!(heatmap_set_loss(&a, &a).unwrap(), 0.0);
        let each: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| {
                js_divergence(&normalize_to_distribution(x), &normalize_to_distribution(y)).unwrap()
            })
            .sum();
        assert!((heatmap_set_loss(&a, &b).unwrap() - each).abs() < 1e-12);
        assert!(heatmap_set_loss(&a, &b[..2]).is_err());
    }

    #[test]
    fn consistency_closed_form() {
        let cfg = SearchConfig::default();
        let a = LandmarkSet::from_points(vec![[0.0, 0.0], [5.0, 5.0]]).unwrap();
        let b = LandmarkSet::from_points(vec![[3.0, 4.0], [5.0, 5.0]]).unwrap();
        assert_eq!(consistency_term(&a, &a, &cfg).unwrap(), 0.0);
        assert_eq!(consistency_term(&a, &b, &cfg).unwrap(), 7.8125);
        let other = LandmarkSet::new(vec![[0.0, 0.0]; 19], Scheme::A19).unwrap();
        assert!(consistency_term(&a, &other, &cfg).is_err());
    }

    #[test]
    fn total_loss_terms() {
        let cfg = SearchConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let pl: Vec<Heatmap> = (0..3).map(|_| random_map(&mut rng, 8, 8)).collect();
        let gl: Vec<Heatmap> = (0..3).map(|_| random_map(&mut rng, 8, 8)).collect();
        let pb: Vec<Heatmap> = (0..2).map(|_| random_map(&mut rng, 8, 8)).collect();
        let gb: Vec<Heatmap> = (0..2).map(|_| random_map(&mut rng, 8, 8)).collect();
        let gt = LandmarkSet::from_points(vec![[1.0, 2.0], [3.0, 3.0], [6.0, 1.0]]).unwrap();
        let gh = LandmarkSet::from_points(vec![[1.0, 2.0], [4.0, 3.0], [2.0, 4.0]]).unwrap();
        let total = total_loss(&pl, &pb, &gl, &gb, &gt, &gh, &cfg).unwrap();
        let parts = heatmap_set_loss(&pb, &gb).unwrap()
            + heatmap_set_loss(&pl, &gl).unwrap()
            + consistency_term(&gt, &gh, &cfg).unwrap();
        assert!((total - parts).abs() < 1e-10);
        assert_eq!(total_loss(&pl, &pb, &pl, &pb, &gt, &gt, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn differentiable_js_matches_eager_and_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let pred = random_map(&mut rng, 6, 5);
        let gt = random_map(&mut rng, 6, 5);
        let target = Tensor::new(&[5, 6], normalize_to_distribution(&gt).probabilities).unwrap();
        let got = js_to_target(&Eager, &pred.to_tensor(), &target)
            .unwrap()
            .item();
        let want = js_divergence(
            &normalize_to_distribution(&pred),
            &normalize_to_distribution(&gt),
        )
        .unwrap();
        assert!((got - want).abs() < 1e-12);
        let err = finite_diff_check(
            |g: &Graph, x| js_to_target(g, &x, &target),
            &pred.to_tensor(),
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn consistency_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let pred = random_map(&mut rng, 6, 6);
        let cfg = SearchConfig::default();
        let err = finite_diff_check(
            |g: &Graph, x| consistency_to_target(g, &x, [1.0, 4.0], &cfg),
            &pred.to_tensor(),
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn soft_argmax_of_symmetric_peak() {
        let h = crate::heatmap::encode_landmark_heatmap([5.0, 5.0], 1.0, 11, 11).unwrap();
        let (x, y) = soft_argmax(&Eager, &h.to_tensor()).unwrap();
        assert!((x.item() - 5.0).abs() < 1e-9 && (y.item() - 5.0).abs() < 1e-9);
    }
}
