//! Procedural face-like training images with 68-point annotations.
//!
//! A template face (jaw arc, brows, nose, eye rings, lips) is jittered per
//! sample, placed with a random similarity transform and drawn as dark
//! strokes on a filled ellipse. Every landmark lies on a drawn stroke.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::heatmap::{interpolate_boundary, BoundaryScheme};
use crate::landmarks::{LandmarkSet, Scheme};

/// Outer eye corners, nose tip and mouth corners of the 68-point layout.
pub const FIVE_POINT: [usize; 5] = [36, 45, 30, 48, 54];

const OUTER_EYE_CORNERS: (usize, usize) = (36, 45);
const STROKE_RADIUS: f64 = 0.8;

/// Which of the 68 template points a sample is annotated with.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubsetLayout {
    pub indices: Vec<usize>,
}

impl SubsetLayout {
    pub fn five_point() -> Self {
        Self {
            indices: FIVE_POINT.to_vec(),
        }
    }

    pub fn all() -> Self {
        Self {
            indices: (0..68).collect(),
        }
    }

    /// 5 and 68 are the shipped layouts.
    pub fn for_count(n: usize) -> Result<Self> {
        match n {
            5 => Ok(Self::five_point()),
            68 => Ok(Self::all()),
            _ => Err(Error::config(format!(
                "synthetic faces ship 5- or 68-point layouts, not {n}"
            ))),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn scheme(&self) -> Scheme {
        Scheme::from_count(self.indices.len())
    }

    /// Positions of the two outer eye corners within the subset.
    pub fn eye_pair(&self) -> Result<(usize, usize)> {
        let find = |i| self.indices.iter().position(|&j| j == i);
        match (find(OUTER_EYE_CORNERS.0), find(OUTER_EYE_CORNERS.1)) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::config(
                "layout lacks the outer eye corners needed for normalization",
            )),
        }
    }

    pub fn select(&self, full: &LandmarkSet) -> Result<LandmarkSet> {
        LandmarkSet::new(
            self.indices.iter().map(|&i| full.points[i]).collect(),
            self.scheme(),
        )
    }
}

/// One generated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFace {
    pub image: Image,
    /// All 68 template points, image pixels.
    pub full: LandmarkSet,
}

fn arc(n: usize, f: impl Fn(f64) -> [f64; 2]) -> Vec<[f64; 2]> {
    (0..n).map(|i| f(i as f64 / (n - 1) as f64)).collect()
}

/// Template in face units: x right, y down, origin mid-face.
fn template(rng: &mut impl Rng) -> Vec<[f64; 2]> {
    let jaw_w = rng.random_range(0.8..0.95);
    let jaw_h = rng.random_range(0.95..1.1);
    let eye_open = rng.random_range(0.06..0.13);
    let brow_y = rng.random_range(-0.6..-0.5);
    let mouth_open = rng.random_range(0.0..0.12);
    let mouth_w = rng.random_range(0.28..0.4);
    let shift = rng.random_range(-0.08..0.08);

    let mut p = Vec::with_capacity(68);
    p.extend(arc(17, |t| {
        let a = PI * (1.0 - t);
        [jaw_w * a.cos(), -0.15 + jaw_h * a.sin()]
    }));
    for side in [-1.0, 1.0] {
        let brow = arc(5, |t| {
            let x = 0.15 + 0.55 * (1.0 - t);
            [side * x + shift * 0.3, brow_y - 0.08 * (PI * t).sin()]
        });
        if side < 0.0 {
            p.extend(brow);
        } else {
            p.extend(brow.into_iter().rev());
        }
    }
    p.extend(arc(4, |t| [shift, -0.3 + 0.45 * t]));
    p.extend(arc(5, |t| {
        [shift + 0.2 * (2.0 * t - 1.0), 0.22 + 0.04 * (PI * t).sin()]
    }));
    for cx in [-0.4, 0.4] {
        let (cx, cy, w) = (cx + shift * 0.3, -0.28, 0.16);
        // corner, two upper, corner, two lower, drawn left to right
        let (first, second) = (cx - w, cx + w);
        let upper = |t: f64| [first + (second - first) * t, cy - eye_open * (PI * t).sin()];
        let lower = |t: f64| {
            [
                first + (second - first) * t,
                cy + eye_open * 0.8 * (PI * t).sin(),
            ]
        };
        p.push(upper(0.0));
        p.push(upper(1.0 / 3.0));
        p.push(upper(2.0 / 3.0));
        p.push(upper(1.0));
        p.push(lower(2.0 / 3.0));
        p.push(lower(1.0 / 3.0));
    }
    let (my, mx) = (0.5, shift);
    let outer_upper = |t: f64| {
        [
            mx + mouth_w * (2.0 * t - 1.0),
            my - 0.06 * (PI * t).sin() - 0.5 * mouth_open * (PI * t).sin(),
        ]
    };
    let outer_lower = |t: f64| {
        [
            mx + mouth_w * (2.0 * t - 1.0),
            my + 0.08 * (PI * t).sin() + 0.5 * mouth_open * (PI * t).sin(),
        ]
    };
    for i in 0..7 {
        p.push(outer_upper(i as f64 / 6.0));
    }
    for i in (1..6).rev() {
        p.push(outer_lower(i as f64 / 6.0));
    }
    let iw = 0.75 * mouth_w;
    let inner_upper = |t: f64| {
        [
            mx + iw * (2.0 * t - 1.0),
            my - 0.5 * mouth_open * (PI * t).sin(),
        ]
    };
    let inner_lower = |t: f64| {
        [
            mx + iw * (2.0 * t - 1.0),
            my + 0.5 * mouth_open * (PI * t).sin(),
        ]
    };
    for i in 0..5 {
        p.push(inner_upper(i as f64 / 4.0));
    }
    for i in (1..4).rev() {
        p.push(inner_lower(i as f64 / 4.0));
    }
    debug_assert_eq!(p.len(), 68);
    p
}

fn stamp(mask: &mut [bool], size: usize, p: [f64; 2]) {
    let r = STROKE_RADIUS;
    let (x0, x1) = (
        (p[0] - r).ceil().max(0.0),
        (p[0] + r).floor().min(size as f64 - 1.0),
    );
    let (y0, y1) = (
        (p[1] - r).ceil().max(0.0),
        (p[1] + r).floor().min(size as f64 - 1.0),
    );
    if x0 > x1 || y0 > y1 {
        return;
    }
    for y in y0 as usize..=y1 as usize {
        for x in x0 as usize..=x1 as usize {
            if (x as f64 - p[0]).hypot(y as f64 - p[1]) <= r {
                mask[y * size + x] = true;
            }
        }
    }
}

/// Draws one face of `size×size` pixels; identical seeds give identical
/// output.
pub fn synthesize_sample(seed: u64, size: usize) -> Result<SyntheticFace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = template(&mut rng);
    let s = size as f64;
    let scale = s * rng.random_range(0.26..0.36);
    let angle = rng.random_range(-25.0f64..25.0).to_radians();
    let center = [
        s * 0.5 + rng.random_range(-0.1..0.1) * s,
        s * 0.5 + rng.random_range(-0.08..0.08) * s,
    ];
    let (sin, cos) = angle.sin_cos();
    let place = |p: [f64; 2]| {
        [
            center[0] + scale * (cos * p[0] - sin * p[1]),
            center[1] + scale * (sin * p[0] + cos * p[1]),
        ]
    };
    let full = LandmarkSet::new(pts.iter().map(|&p| place(p)).collect(), Scheme::W68)?;

    let bg: [f64; 3] = [
        rng.random_range(0.0..0.35),
        rng.random_range(0.0..0.35),
        rng.random_range(0.0..0.35),
    ];
    let skin: [f64; 3] = [
        rng.random_range(0.6..0.95),
        rng.random_range(0.45..0.8),
        rng.random_range(0.35..0.7),
    ];
    let ink = rng.random_range(0.0..0.12);
    let (ax, ay) = (scale * 1.0, scale * 1.2);
    let fc = place([0.0, -0.1]);

    let mut strokes = vec![false; size * size];
    let boundaries = BoundaryScheme::builtin(Scheme::W68)?;
    for t in 0..boundaries.boundary_count() {
        let chain: Vec<[f64; 2]> = boundaries
            .polyline(t)
            .iter()
            .map(|&i| full.points[i])
            .collect();
        for p in interpolate_boundary(&chain)? {
            stamp(&mut strokes, size, p);
        }
        for &p in &chain {
            stamp(&mut strokes, size, p);
        }
    }

    let mut image = Image::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let noise = rng.random_range(-0.04..0.04);
            let (dx, dy) = (x as f64 - fc[0], y as f64 - fc[1]);
            let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
            let inside = (u / ax).powi(2) + (v / ay).powi(2) <= 1.0;
            let rgb = if strokes[y * size + x] {
                [ink; 3]
            } else if inside {
                skin
            } else {
                bg
            };
            image.set(x, y, rgb.map(|c| (c + noise).clamp(0.0, 1.0)));
        }
    }
    Ok(SyntheticFace { image, full })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = synthesize_sample(11, 64).unwrap();
        let b = synthesize_sample(11, 64).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.full, synthesize_sample(12, 64).unwrap().full);
    }

    #[test]
    fn landmarks_sit_on_strokes() {
        for seed in 0..50 {
            let face = synthesize_sample(seed, 64).unwrap();
            for p in &face.full.points {
                let (x, y) = (p[0].round() as usize, p[1].round() as usize);
                let lum = (0..3).map(|c| face.image.get(x, y, c)).sum::<f64>() / 3.0;
                assert!(lum < 0.2, "seed {seed}: ({x},{y}) luminance {lum}");
            }
        }
    }

    #[test]
    fn landmarks_span_the_frame() {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for seed in 0..1000 {
            for p in synthesize_sample(seed, 64).unwrap().full.points {
                for a in 0..2 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
        }
        for a in 0..2 {
            assert!(
                hi[a] - lo[a] >= 0.6 * 64.0,
                "axis {a}: {}..{}",
                lo[a],
                hi[a]
            );
            assert!(lo[a] >= 0.0 && hi[a] <= 63.0, "axis {a} leaves the frame");
        }
    }

    #[test]
    fn eye_corners_are_outer() {
        let face = synthesize_sample(0, 64).unwrap();
        let five = SubsetLayout::five_point().select(&face.full).unwrap();
        assert_eq!(five.len(), 5);
        assert_eq!(SubsetLayout::five_point().eye_pair().unwrap(), (0, 1));
        let d =
            (five.points[0][0] - five.points[1][0]).hypot(five.points[0][1] - five.points[1][1]);
        assert!(d > 8.0);
    }
}
