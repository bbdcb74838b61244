//! Annotation ingestion, image cropping and geometric augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::landmarks::LandmarkSet;
use crate::tensor::Tensor;

/// Axis-aligned box `(x, y, w, h)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::contract(format!(
                "bbox needs positive finite size, got {w}x{h}"
            )));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn center(&self) -> [f64; 2] {
        [self.x + 0.5 * self.w, self.y + 0.5 * self.h]
    }

    /// Geometric mean of width and height.
    pub fn face_size(&self) -> f64 {
        (self.w * self.h).sqrt()
    }
}

/// RGB image with samples in `[0, 1]`, row-major HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `[h, w, 3]` tensor view of the pixels.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width, 3], self.data.clone())
            .expect("image buffer matches its shape")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::contract(format!("cannot decode {}: {other}", path.display())),
            })?
            .to_rgb8();
        Ok(Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ColorType::Rgb8,
        )
        .map_err(|e| image_error(path, e))
    }

    /// Bilinear sample at a continuous position; outside pixels read as black.
    fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let mut out = [0.0; 3];
        for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
            for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                let w = wx * wy;
                if w == 0.0 {
                    continue;
                }
                let (px, py) = (x0 + dx, y0 + dy);
                if px < 0.0 || py < 0.0 || px >= self.width as f64 || py >= self.height as f64 {
                    continue;
                }
                for (c, o) in out.iter_mut().enumerate() {
                    *o += w * self.get(px as usize, py as usize, c);
                }
            }
        }
        out
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::contract(format!("cannot encode {}: {other}", path.display())),
    }
}

/// Writes a `[0, 1]` map as an 8-bit grayscale PNG.
pub fn save_gray_png(path: &Path, values: &[f64], width: usize, height: usize) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::dim(
            "save_gray_png",
            &[values.len()],
            &[height, width],
        ));
    }
    let bytes: Vec<u8> = values.iter().map(|&v| to_u8(v)).collect();
    image::save_buffer(
        path,
        &bytes,
        width as u32,
        height as u32,
        image::ColorType::L8,
    )
    .map_err(|e| image_error(path, e))
}

/// 2-D affine map `p -> [a b; d e] p + [c; f]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine2 {
    pub m: [[f64; 3]; 2],
}

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2 {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    /// Maps `bbox` onto `[0, target]²`.
    pub fn crop(bbox: &BBox, target: usize) -> Self {
        let (sx, sy) = (target as f64 / bbox.w, target as f64 / bbox.h);
        Self {
            m: [[sx, 0.0, -bbox.x * sx], [0.0, sy, -bbox.y * sy]],
        }
    }

    /// Rotation by `angle` radians and uniform `scale` about `center`.
    pub fn rotate_scale(center: [f64; 2], angle: f64, scale: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let (a, b, d, e) = (scale * c, -scale * s, scale * s, scale * c);
        Self {
            m: [
                [a, b, center[0] - a * center[0] - b * center[1]],
                [d, e, center[1] - d * center[0] - e * center[1]],
            ],
        }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let m = &self.m;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2],
        ]
    }

    /// `self ∘ other`: applies `other` first.
    pub fn then_after(&self, other: &Affine2) -> Affine2 {
        let (a, b) = (&self.m, &other.m);
        let mut m = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                m[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
            m[r][2] += a[r][2];
        }
        Affine2 { m }
    }

    pub fn inverse(&self) -> Result<Affine2> {
        let m = &self.m;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-300 || !det.is_finite() {
            return Err(Error::contract("singular affine map"));
        }
        let (a, b, d, e) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
        Ok(Affine2 {
            m: [
                [a, b, -(a * m[0][2] + b * m[1][2])],
                [d, e, -(d * m[0][2] + e * m[1][2])],
            ],
        })
    }

    pub fn apply_set(&self, set: &LandmarkSet) -> LandmarkSet {
        set.map(|p| self.apply(p))
    }
}

/// Renders a `size×size` output whose pixel `q` reads the input at
/// `forward⁻¹(q)`.
pub fn warp(image: &Image, forward: &Affine2, width: usize, height: usize) -> Result<Image> {
    let inv = forward.inverse()?;
    let mut out = Image::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let [sx, sy] = inv.apply([x as f64, y as f64]);
            out.set(x, y, image.sample(sx, sy));
        }
    }
    Ok(out)
}

/// Crops `bbox` out of `image`, resamples it to `target²` and returns the
/// landmark map used.
pub fn crop_and_resize(image: &Image, bbox: &BBox, target: usize) -> Result<(Image, Affine2)> {
    let ox = (bbox.x + bbox.w).min(image.width as f64) - bbox.x.max(0.0);
    let oy = (bbox.y + bbox.h).min(image.height as f64) - bbox.y.max(0.0);
    if ox <= 0.0 || oy <= 0.0 {
        return Err(Error::contract("bbox does not overlap the image"));
    }
    let map = Affine2::crop(bbox, target);
    Ok((warp(image, &map, target, target)?, map))
}

/// Training-time geometric jitter ranges.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Maximum absolute rotation, degrees.
    pub max_rotation_deg: f64,
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 60.0,
            min_scale: 0.8,
            max_scale: 1.2,
        }
    }
}

/// Image with its landmark annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub landmarks: LandmarkSet,
}

/// Draws a rotation and scale about the image center.
pub fn draw_augmentation(
    rng: &mut impl Rng,
    cfg: &AugmentConfig,
    width: usize,
    height: usize,
) -> Affine2 {
    let r = cfg.max_rotation_deg;
    let angle = if r > 0.0 {
        rng.random_range(-r..r)
    } else {
        0.0
    };
    let scale = if cfg.max_scale > cfg.min_scale {
        rng.random_range(cfg.min_scale..cfg.max_scale)
    } else {
        cfg.min_scale
    };
    Affine2::rotate_scale(
        [0.5 * width as f64, 0.5 * height as f64],
        angle.to_radians(),
        scale,
    )
}

/// Rotates and scales a sample about its center, returning the map applied.
pub fn augment(
    sample: &Sample,
    rng: &mut impl Rng,
    cfg: &AugmentConfig,
) -> Result<(Sample, Affine2)> {
    let (w, h) = (sample.image.width, sample.image.height);
    let map = draw_augmentation(rng, cfg, w, h);
    let out = Sample {
        image: warp(&sample.image, &map, w, h)?,
        landmarks: map.apply_set(&sample.landmarks),
    };
    Ok((out, map))
}

/// Parses a pts annotation. File coordinates are 1-based; the result is
/// 0-based.
pub fn parse_pts(text: &str) -> Result<LandmarkSet> {
    let mut expected: Option<usize> = None;
    let mut points = Vec::new();
    let mut in_body = false;
    let mut closed_at = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if closed_at.is_some() {
            return Err(Error::Parse {
                line: line_no,
                msg: "content after closing brace".into(),
            });
        }
        if in_body {
            if line == "}" {
                closed_at = Some(line_no);
                continue;
            }
            let nums: Vec<&str> = line.split_whitespace().collect();
            let parse = |s: &str| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        line: line_no,
                        msg: format!("bad coordinate `{s}`"),
                    })
            };
            if nums.len() != 2 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected two coordinates, found {}", nums.len()),
                });
            }
            points.push([parse(nums[0])? - 1.0, parse(nums[1])? - 1.0]);
            continue;
        }
        if line == "{" {
            in_body = true;
            continue;
        }
        match line.split_once(':') {
            Some(("n_points", v)) => {
                expected = Some(v.trim().parse().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("bad n_points `{}`", v.trim()),
                })?)
            }
            Some(("version", _)) => {}
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("unexpected header line `{line}`"),
                })
            }
        }
    }
    let Some(end) = closed_at else {
        return Err(Error::Parse {
            line: text.lines().count(),
            msg: "missing closing brace".into(),
        });
    };
    let expected = expected.ok_or_else(|| Error::Parse {
        line: 1,
        msg: "missing n_points".into(),
    })?;
    if expected != points.len() {
        return Err(Error::Parse {
            line: end,
            msg: format!(
                "n_points is {expected} but {} coordinate lines follow",
                points.len()
            ),
        });
    }
    LandmarkSet::from_points(points)
}

/// Serializes a landmark set in pts format (1-based coordinates).
pub fn write_pts(set: &LandmarkSet) -> String {
    let mut s = format!("version: 1\nn_points: {}\n{{\n", set.len());
    for p in &set.points {
        s.push_str(&format!("{} {}\n", p[0] + 1.0, p[1] + 1.0));
    }
    s.push_str("}\n");
    s
}

pub fn read_pts(path: &Path) -> Result<LandmarkSet> {
    parse_pts(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// One manifest line: an image, its annotation and a face box.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRecord {
    pub image_path: PathBuf,
    pub pts_path: PathBuf,
    pub landmarks: LandmarkSet,
    pub bbox: BBox,
    /// Split and subset tags, e.g. `test/challenging`.
    pub split: String,
}

impl AnnotationRecord {
    /// Record key used to join predictions against ground truth.
    pub fn key(&self) -> String {
        record_key(&self.pts_path)
    }
}

/// File stem of an annotation path.
pub fn record_key(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn parse_bbox(line: usize, field: &str) -> Result<BBox> {
    let vals: Vec<f64> = field
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Parse {
            line,
            msg: format!("bad bbox `{field}`"),
        })?;
    if vals.len() != 4 {
        return Err(Error::Parse {
            line,
            msg: format!("bbox needs 4 values, got {}", vals.len()),
        });
    }
    BBox::new(vals[0], vals[1], vals[2], vals[3]).map_err(|e| Error::Parse {
        line,
        msg: e.to_string(),
    })
}

/// Parses manifest text; relative paths resolve against `base`. Pts files
/// are read eagerly, images are not.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    let mut missing = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let image_path = base.join(fields[0].trim());
        let pts_path = base.join(fields[1].trim());
        let bbox = parse_bbox(line, fields[2])?;
        if !pts_path.exists() {
            missing.push(pts_path.display().to_string());
            continue;
        }
        out.push(AnnotationRecord {
            landmarks: read_pts(&pts_path)?,
            image_path,
            pts_path,
            bbox,
            split: fields[3].trim().to_string(),
        });
    }
    if !missing.is_empty() {
        return Err(Error::io(
            missing.join(", "),
            std::io::Error::new(std::io::ErrorKind::NotFound, "annotation files missing"),
        ));
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        Image {
            width: w,
            height: h,
            data: (0..w * h * 3).map(|_| rng.random::<f64>()).collect(),
        }
    }

    #[test]
    fn minimal_pts() {
        let set = parse_pts("version: 1\nn_points: 2\n{\n1.0 1.0\n5.0 9.0\n}\n").unwrap();
        assert_eq!(set.points, vec![[0.0, 0.0], [4.0, 8.0]]);
    }

    #[test]
    fn pts_count_mismatch_names_count() {
        let mut text = String::from("version: 1\nn_points: 68\n{\n");
        for i in 0..67 {
            text.push_str(&format!("{i} {i}\n"));
        }
        text.push_str("}\n");
        match parse_pts(&text) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 71);
                assert!(msg.contains("68"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_pts("version: 1\nn_points: 1\n{\n1.0 x\n}\n"),
            Err(Error::Parse { line: 4, .. })
        ));
    }

    #[test]
    fn pts_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<[f64; 2]> = (0..68)
            .map(|_| {
                [
                    rng.random_range(-10.0..300.0),
                    rng.random_range(-10.0..300.0),
                ]
            })
            .collect();
        let set = LandmarkSet::from_points(pts).unwrap();
        let back = parse_pts(&write_pts(&set)).unwrap();
        for (a, b) in set.points.iter().zip(&back.points) {
            assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn full_crop_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 256, 256);
        let (out, map) =
            crop_and_resize(&img, &BBox::new(0.0, 0.0, 256.0, 256.0).unwrap(), 256).unwrap();
        assert_eq!(map, Affine2::IDENTITY);
        assert_eq!(out.data, img.data);
    }

    #[test]
    fn left_half_doubles_x() {
        let map = Affine2::crop(&BBox::new(0.0, 0.0, 128.0, 256.0).unwrap(), 256);
        assert_eq!(map.apply([10.0, 7.0]), [20.0, 7.0]);
    }

    #[test]
    fn crop_inverse_recovers_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let bbox = BBox::new(
                rng.random_range(-50.0..200.0),
                rng.random_range(-50.0..200.0),
                rng.random_range(5.0..300.0),
                rng.random_range(5.0..300.0),
            )
            .unwrap();
            let map = Affine2::crop(&bbox, 256);
            let inv = map.inverse().unwrap();
            let p = [rng.random_range(0.0..400.0), rng.random_range(0.0..400.0)];
            let q = inv.apply(map.apply(p));
            assert!((p[0] - q[0]).abs() < 1e-6 && (p[1] - q[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn disjoint_bbox_rejected() {
        let img = Image::new(10, 10);
        let bbox = BBox::new(20.0, 0.0, 5.0, 5.0).unwrap();
        assert!(matches!(
            crop_and_resize(&img, &bbox, 8),
            Err(Error::Contract(_))
        ));
        assert!(BBox::new(0.0, 0.0, 0.0, 5.0).is_err());
    }

    #[test]
    fn zero_rotation_unit_scale_is_identity() {
        let map = Affine2::rotate_scale([32.0, 32.0], 0.0, 1.0);
        let p = [3.25, 60.5];
        let q = map.apply(p);
        assert!((p[0] - q[0]).abs() <= 1e-9 && (p[1] - q[1]).abs() <= 1e-9);
    }

    #[test]
    fn quarter_turn() {
        let c = [10.0, 20.0];
        let r = 7.0;
        let q = Affine2::rotate_scale(c, std::f64::consts::FRAC_PI_2, 1.0).apply([c[0] + r, c[1]]);
        assert!((q[0] - c[0]).abs() <= 1e-9 && (q[1] - (c[1] + r)).abs() <= 1e-9);
    }

    #[test]
    fn augmentation_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = AugmentConfig::default();
        for _ in 0..10_000 {
            let m = draw_augmentation(&mut rng, &cfg, 64, 64).m;
            let scale = (m[0][0] * m[0][0] + m[1][0] * m[1][0]).sqrt();
            let angle = m[1][0].atan2(m[0][0]).to_degrees();
            assert!(angle > -60.0 && angle < 60.0, "{angle}");
            assert!((0.8..1.2 + 1e-12).contains(&scale), "{scale}");
        }
    }

    #[test]
    fn manifest_reports_missing_and_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("a.pts"),
            "version: 1\nn_points: 1\n{\n2 3\n}\n",
        )
        .unwrap();
        let recs = parse_manifest("a.png\ta.pts\t0,0,10,10\ttrain\n", dir.path()).unwrap();
        assert_eq!(recs[0].landmarks.points, vec![[1.0, 2.0]]);
        assert_eq!(recs[0].key(), "a");
        assert!(matches!(
            parse_manifest("a.png\tb.pts\t0,0,10,10\ttrain\n", dir.path()),
            Err(Error::Io { .. })
        ));
        assert!(matches!(
            parse_manifest("a.png\ta.pts\t0,0,10\ttrain\n", dir.path()),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
