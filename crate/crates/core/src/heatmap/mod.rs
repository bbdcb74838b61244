//! Landmark and boundary heatmaps: encoding, fusion and argmax decoding.
//!
//! Pixel `(x, y)` has its center at integer coordinates; values are stored
//! row-major, `values[y * width + x]`.

pub mod dump;
mod edt;
mod scheme;

pub use edt::{distance_transform, DistanceMap};
pub(crate) use scheme::parse_keyed_lists;
pub use scheme::{BoundaryScheme, Chain, BOUNDARY_COUNT};

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::landmarks::LandmarkSet;
use crate::tensor::Tensor;

/// Default Gaussian width for landmark heatmaps.
pub const SIGMA1: f64 = 3.0;
/// Default width for boundary heatmaps.
pub const SIGMA2: f64 = 3.0;
/// Default far-field value of boundary heatmaps.
pub const XI: f64 = 0.01;

/// Maximum spacing between consecutive samples of a dense boundary.
pub const SAMPLE_SPACING: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatmapKind {
    Landmark,
    Boundary,
    Fused,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub kind: HeatmapKind,
}

impl Heatmap {
    pub fn new(width: usize, height: usize, values: Vec<f64>, kind: HeatmapKind) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::dim("heatmap", &[values.len()], &[height, width]));
        }
        Ok(Self {
            width,
            height,
            values,
            kind,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64, kind: HeatmapKind) -> Self {
        Self {
            width,
            height,
            values: vec![value; width * height],
            kind,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// `[height, width]` tensor view of the values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width], self.values.clone()).expect("validated size")
    }

    /// Channel `c` of an `H×W×C` map.
    pub fn from_channel(t: &Tensor, c: usize, kind: HeatmapKind) -> Result<Self> {
        if t.rank() != 3 || c >= t.shape()[2] {
            return Err(Error::dim("heatmap channel", t.shape(), &[c]));
        }
        let (h, w, ch) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let values = t.data().chunks(ch).map(|px| px[c]).collect();
        Self::new(w, h, values, kind)
    }

    pub fn clamped(&self) -> Self {
        Self {
            values: self.values.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }
}

fn require_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::contract(format!(
            "{name} must be positive and finite, got {v}"
        )));
    }
    Ok(())
}

/// `exp(−((x−u)² + (y−v)²) / (2σ₁²))` on a `width×height` grid.
pub fn encode_landmark_heatmap(
    center: [f64; 2],
    sigma1: f64,
    width: usize,
    height: usize,
) -> Result<Heatmap> {
    require_positive("sigma1", sigma1)?;
    let denom = 2.0 * sigma1 * sigma1;
    let mut values = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let d2 = (x as f64 - center[0]).powi(2) + (y as f64 - center[1]).powi(2);
            values.push((-d2 / denom).exp());
        }
    }
    Heatmap::new(width, height, values, HeatmapKind::Landmark)
}

/// The landmark Gaussian as a backend value, differentiable in `sigma`
/// (a single-element value). Shape `[height, width]`.
pub fn gaussian_map<B: Backend>(
    b: &B,
    center: [f64; 2],
    sigma: &B::Value,
    width: usize,
    height: usize,
) -> Result<B::Value> {
    let mut d2 = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            d2.push((x as f64 - center[0]).powi(2) + (y as f64 - center[1]).powi(2));
        }
    }
    let d2 = b.constant(Tensor::new(&[height, width], d2)?);
    let inv_var = b.recip(&b.mul(sigma, sigma)?);
    let scaled = b.mul_scalar(&d2, &inv_var)?;
    Ok(b.exp(&b.scale(&scaled, -0.5)))
}

/// Dense piecewise-linear resampling of a polyline: consecutive samples are
/// at most [`SAMPLE_SPACING`] apart and every input vertex is kept exactly.
pub fn interpolate_boundary(chain: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    if chain.len() < 2 {
        return Err(Error::contract(format!(
            "boundary needs at least 2 points, got {}",
            chain.len()
        )));
    }
    let mut out = Vec::new();
    for seg in chain.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        let steps = ((len / SAMPLE_SPACING).ceil() as usize).max(1);
        for i in 0..steps {
            let t = i as f64 / steps as f64;
            out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    out.push(*chain.last().expect("len >= 2"));
    Ok(out)
}

/// Marks the pixel nearest to each point; points outside the frame are
/// dropped.
pub fn rasterize(points: &[[f64; 2]], width: usize, height: usize) -> Vec<bool> {
    let mut mask = vec![false; width * height];
    for p in points {
        let (x, y) = (p[0].round(), p[1].round());
        if x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64 {
            mask[y as usize * width + x as usize] = true;
        }
    }
    mask
}

/// Distance from each pixel to the rasterized dense polyline through
/// `points` (a single point is its own boundary).
pub fn boundary_distance(points: &[[f64; 2]], width: usize, height: usize) -> Result<DistanceMap> {
    if points.is_empty() {
        return Err(Error::contract("distance transform of an empty boundary"));
    }
    let dense = if points.len() == 1 {
        points.to_vec()
    } else {
        interpolate_boundary(points)?
    };
    distance_transform(&rasterize(&dense, width, height), width, height)
}

/// Profile of the boundary heatmap as a function of distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryProfile {
    /// `exp(−Dist/(2σ₂²))` inside `2σ₂`, `ξ` outside.
    #[default]
    Linear,
    /// `exp(−Dist²/(2σ₂²))` inside `2σ₂`, `ξ` outside.
    Squared,
}

/// Piecewise boundary heatmap from a distance map.
pub fn encode_boundary_heatmap(
    dist: &DistanceMap,
    sigma2: f64,
    xi: f64,
    profile: BoundaryProfile,
) -> Result<Heatmap> {
    require_positive("sigma2", sigma2)?;
    if !(0.0..(-1.0 / sigma2).exp()).contains(&xi) {
        return Err(Error::contract(format!(
            "xi must lie in [0, exp(-1/sigma2)), got {xi}"
        )));
    }
    let denom = 2.0 * sigma2 * sigma2;
    let values = dist
        .values
        .iter()
        .map(|&d| {
            if d < 2.0 * sigma2 {
                match profile {
                    BoundaryProfile::Linear => (-d / denom).exp(),
                    BoundaryProfile::Squared => (-d * d / denom).exp(),
                }
            } else {
                xi
            }
        })
        .collect();
    Heatmap::new(dist.width, dist.height, values, HeatmapKind::Boundary)
}

/// Settings for ground-truth encoding.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodeConfig {
    pub sigma1: f64,
    pub sigma2: f64,
    pub xi: f64,
    pub profile: BoundaryProfile,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        Self {
            sigma1: SIGMA1,
            sigma2: SIGMA2,
            xi: XI,
            profile: BoundaryProfile::Linear,
        }
    }
}

impl EncodeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma1", self.sigma1), ("sigma2", self.sigma2)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..(-1.0 / self.sigma2).exp()).contains(&self.xi) {
            return Err(Error::config(format!(
                "xi must lie in [0, exp(-1/sigma2)), got {}",
                self.xi
            )));
        }
        Ok(())
    }
}

/// Ground-truth maps of one landmark set: `L` landmark and `T` boundary maps.
pub struct EncodedTargets {
    pub landmarks: Vec<Heatmap>,
    pub boundaries: Vec<Heatmap>,
}

/// Encodes every landmark and boundary of `set`. A boundary whose samples
/// all fall outside the frame is encoded as the constant far value `ξ`.
pub fn encode_targets(
    set: &LandmarkSet,
    scheme: &BoundaryScheme,
    width: usize,
    height: usize,
    cfg: &EncodeConfig,
) -> Result<EncodedTargets> {
    if set.len() != scheme.landmark_count {
        return Err(Error::contract(format!(
            "boundary table covers {} landmarks, set has {}",
            scheme.landmark_count,
            set.len()
        )));
    }
    let landmarks = set
        .points
        .iter()
        .map(|&p| encode_landmark_heatmap(p, cfg.sigma1, width, height))
        .collect::<Result<Vec<_>>>()?;
    let boundaries = (0..scheme.boundary_count())
        .map(|t| {
            let pts: Vec<[f64; 2]> = scheme.polyline(t).iter().map(|&i| set.points[i]).collect();
            match boundary_distance(&pts, width, height) {
                Ok(dist) => encode_boundary_heatmap(&dist, cfg.sigma2, cfg.xi, cfg.profile),
                Err(Error::Contract(_)) => Ok(Heatmap::filled(
                    width,
                    height,
                    cfg.xi,
                    HeatmapKind::Boundary,
                )),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedTargets {
        landmarks,
        boundaries,
    })
}

/// `H ⊗ B` for landmark `landmark` and boundary `boundary`, after clamping
/// both inputs to `[0, 1]`.
pub fn fuse_boundary_adaptive(
    h: &Heatmap,
    b: &Heatmap,
    landmark: usize,
    boundary: usize,
    scheme: &BoundaryScheme,
) -> Result<Heatmap> {
    match scheme.boundary_of(landmark) {
        Some(t) if t == boundary => {}
        other => {
            return Err(Error::contract(format!(
                "landmark {landmark} belongs to boundary {other:?}, not {boundary}"
            )))
        }
    }
    if h.width != b.width || h.height != b.height {
        return Err(Error::dim(
            "fuse_boundary_adaptive",
            &[h.height, h.width],
            &[b.height, b.width],
        ));
    }
    let values = h
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| x.clamp(0.0, 1.0) * y.clamp(0.0, 1.0))
        .collect();
    Heatmap::new(h.width, h.height, values, HeatmapKind::Fused)
}

/// Pixel of the maximum value, first in row-major order on ties. NaN pixels
/// are skipped.
pub fn decode_argmax(h: &Heatmap) -> Result<(usize, usize)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in h.values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    let (i, _) = best.ok_or_else(|| Error::contract("argmax of an all-NaN heatmap"))?;
    Ok((i % h.width, i / h.width))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::gradcheck::finite_diff_check;
    use crate::landmarks::Scheme;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gaussian_closed_forms() {
        let h = encode_landmark_heatmap([10.0, 10.0], 3.0, 32, 32).unwrap();
        assert_eq!(h.get(10, 10), 1.0);
        assert!((h.get(13, 10) - (-0.5f64).exp()).abs() < 1e-15);
        for y in 0..32 {
            for x in 0..32 {
                let want =
                    (-(((x as f64 - 10.0).powi(2) + (y as f64 - 10.0).powi(2)) / 18.0)).exp();
                assert!((h.get(x, y) - want).abs() < 1e-12);
            }
        }
        assert!(encode_landmark_heatmap([0.0, 0.0], 0.0, 4, 4).is_err());
    }

    #[test]
    fn gaussian_map_matches_encoder_and_has_sigma_gradient() {
        let want = encode_landmark_heatmap([4.3, 2.0], 2.5, 9, 7).unwrap();
        let got = gaussian_map(
            &crate::backend::Eager,
            [4.3, 2.0],
            &Tensor::scalar(2.5),
            9,
            7,
        )
        .unwrap();
        assert!(got
            .data()
            .iter()
            .zip(&want.values)
            .all(|(a, b)| (a - b).abs() < 1e-15));
        let err = finite_diff_check(
            |g: &Graph, s| Ok(g.sum(&gaussian_map(g, [4.3, 2.0], &s, 9, 7)?)),
            &Tensor::scalar(2.5),
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn interpolation_keeps_endpoints_and_spacing() {
        let d = interpolate_boundary(&[[0.0, 0.0], [4.0, 0.0]]).unwrap();
        for k in 0..=4 {
            assert!(d.contains(&[k as f64, 0.0]));
        }
        assert!(interpolate_boundary(&[[1.0, 1.0]]).is_err());
    }

    fn seg_dist(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let l2 = dx * dx + dy * dy;
        let t = if l2 == 0.0 {
            0.0
        } else {
            (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / l2).clamp(0.0, 1.0)
        };
        ((p[0] - a[0] - t * dx).powi(2) + (p[1] - a[1] - t * dy).powi(2)).sqrt()
    }

    #[test]
    fn samples_lie_on_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let chain: Vec<[f64; 2]> = (0..5)
            .map(|_| [rng.random_range(0.0..30.0), rng.random_range(0.0..30.0)])
            .collect();
        let dense = interpolate_boundary(&chain).unwrap();
        for p in &dense {
            let d = chain
                .windows(2)
                .map(|s| seg_dist(*p, s[0], s[1]))
                .fold(f64::INFINITY, f64::min);
            assert!(d < 1e-9);
        }
        for w in dense.windows(2) {
            let gap = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            assert!(gap <= SAMPLE_SPACING + 1e-12);
        }
    }

    #[test]
    fn boundary_profile_branches() {
        let dist = DistanceMap {
            width: 4,
            height: 1,
            values: vec![0.0, 3.0, 6.0, 7.0],
        };
        let h = encode_boundary_heatmap(&dist, 3.0, XI, BoundaryProfile::Linear).unwrap();
        assert_eq!(h.values[0], 1.0);
        assert!((h.values[1] - (-1.0f64 / 6.0).exp()).abs() < 1e-15);
        assert_eq!(h.values[2], XI);
        assert_eq!(h.values[3], XI);
        let sq = encode_boundary_heatmap(&dist, 3.0, XI, BoundaryProfile::Squared).unwrap();
        assert!((sq.values[1] - (-0.5f64).exp()).abs() < 1e-15);
        assert!(encode_boundary_heatmap(&dist, 3.0, 0.9, BoundaryProfile::Linear).is_err());
    }

    #[test]
    fn fusion_rules() {
        let scheme = BoundaryScheme::builtin(Scheme::W68).unwrap();
        let h = encode_landmark_heatmap([5.0, 5.0], 3.0, 16, 16).unwrap();
        let ones = Heatmap::filled(16, 16, 1.0, HeatmapKind::Boundary);
        assert_eq!(
            fuse_boundary_adaptive(&h, &ones, 0, 0, &scheme)
                .unwrap()
                .values,
            h.values
        );
        assert!(matches!(
            fuse_boundary_adaptive(&h, &ones, 0, 3, &scheme),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn argmax_rules() {
        let h = encode_landmark_heatmap([7.0, 3.0], 3.0, 16, 16).unwrap();
        assert_eq!(decode_argmax(&h).unwrap(), (7, 3));
        let flat = Heatmap::filled(4, 4, 0.2, HeatmapKind::Landmark);
        assert_eq!(decode_argmax(&flat).unwrap(), (0, 0));
        let nan = Heatmap::filled(2, 2, f64::NAN, HeatmapKind::Landmark);
        assert!(decode_argmax(&nan).is_err());
    }

    #[test]
    fn targets_have_scheme_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let pts = (0..68)
            .map(|_| [rng.random_range(2.0..30.0), rng.random_range(2.0..30.0)])
            .collect();
        let set = LandmarkSet::new(pts, Scheme::W68).unwrap();
        let scheme = BoundaryScheme::builtin(Scheme::W68).unwrap();
        let t = encode_targets(&set, &scheme, 32, 32, &EncodeConfig::default()).unwrap();
        assert_eq!(t.landmarks.len() + t.boundaries.len(), 81);
    }

    #[test]
    fn off_frame_boundary_is_far_value() {
        let mut pts = vec![[5.0, 5.0]; 68];
        for p in pts.iter_mut().take(17) {
            *p = [-50.0, -50.0];
        }
        let set = LandmarkSet::new(pts, Scheme::W68).unwrap();
        let scheme = BoundaryScheme::builtin(Scheme::W68).unwrap();
        let t = encode_targets(&set, &scheme, 16, 16, &EncodeConfig::default()).unwrap();
        assert!(t.boundaries[0].values.iter().all(|&v| v == XI));
    }
}
