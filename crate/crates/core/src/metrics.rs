//! Normalized mean error, failure rate and cumulative error distribution.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::BBox;
use crate::error::{Error, Result};
use crate::heatmap::parse_keyed_lists;
use crate::landmarks::{LandmarkSet, Scheme};

/// Threshold above which an image counts as a failure.
pub const FAILURE_THRESHOLD: f64 = 0.10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Distance between the two eye-ring centroids.
    InterPupil,
    /// Distance between the outer eye corners.
    InterOcular,
    /// `sqrt(w * h)` of the ground-truth box.
    FaceSize,
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "inter_pupil" => Ok(Self::InterPupil),
            "inter_ocular" => Ok(Self::InterOcular),
            "face_size" => Ok(Self::FaceSize),
            _ => Err(Error::config(format!("unknown normalization `{s}`"))),
        }
    }
}

/// Landmark indices defining each eye for a scheme.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EyeReference {
    pub left_pupil: Vec<usize>,
    pub right_pupil: Vec<usize>,
    pub left_corner: usize,
    pub right_corner: usize,
}

impl EyeReference {
    pub fn parse(text: &str, landmark_count: usize) -> Result<Self> {
        let mut fields: [Option<Vec<usize>>; 4] = Default::default();
        for (line, key, list) in parse_keyed_lists(text)? {
            let slot = match key.as_str() {
                "left_pupil" => 0,
                "right_pupil" => 1,
                "left_corner" => 2,
                "right_corner" => 3,
                _ => {
                    return Err(Error::Parse {
                        line,
                        msg: format!("unknown key `{key}`"),
                    })
                }
            };
            if let Some(&bad) = list.iter().find(|&&i| i >= landmark_count) {
                return Err(Error::Parse {
                    line,
                    msg: format!("landmark {bad} out of range for {landmark_count} points"),
                });
            }
            if slot >= 2 && list.len() != 1 {
                return Err(Error::Parse {
                    line,
                    msg: format!("`{key}` takes exactly one index"),
                });
            }
            fields[slot] = Some(list);
        }
        let [lp, rp, lc, rc] = fields;
        let need = |v: Option<Vec<usize>>, k: &str| {
            v.ok_or_else(|| Error::config(format!("eye table lacks `{k}`")))
        };
        Ok(Self {
            left_pupil: need(lp, "left_pupil")?,
            right_pupil: need(rp, "right_pupil")?,
            left_corner: need(lc, "left_corner")?[0],
            right_corner: need(rc, "right_corner")?[0],
        })
    }

    pub fn builtin(scheme: Scheme) -> Result<Self> {
        let text = match scheme {
            Scheme::W68 => include_str!("../data/eyes/w68.txt"),
            Scheme::C29 => include_str!("../data/eyes/c29.txt"),
            Scheme::A19 => include_str!("../data/eyes/a19.txt"),
            Scheme::F98 => include_str!("../data/eyes/f98.txt"),
            Scheme::Custom(n) => {
                return Err(Error::config(format!(
                    "no eye table ships for {n}-point sets"
                )))
            }
        };
        Self::parse(text, scheme.count())
    }
}

fn centroid(set: &LandmarkSet, idx: &[usize]) -> [f64; 2] {
    let n = idx.len() as f64;
    let (sx, sy) = idx.iter().fold((0.0, 0.0), |(x, y), &i| {
        (x + set.points[i][0], y + set.points[i][1])
    });
    [sx / n, sy / n]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Normalizing length for `gt` under `norm`.
pub fn reference_length(gt: &LandmarkSet, norm: Normalization, bbox: Option<&BBox>) -> Result<f64> {
    let len = match norm {
        Normalization::FaceSize => bbox
            .ok_or_else(|| Error::contract("face-size normalization needs a ground-truth box"))?
            .face_size(),
        Normalization::InterPupil => {
            let eyes = EyeReference::builtin(gt.scheme)?;
            dist(
                centroid(gt, &eyes.left_pupil),
                centroid(gt, &eyes.right_pupil),
            )
        }
        Normalization::InterOcular => {
            let eyes = EyeReference::builtin(gt.scheme)?;
            dist(gt.points[eyes.left_corner], gt.points[eyes.right_corner])
        }
    };
    if !(len > 0.0) {
        return Err(Error::contract(format!(
            "zero normalization length ({norm:?})"
        )));
    }
    Ok(len)
}

/// Mean point-to-point error of `pred` against `gt`, divided by the
/// reference length.
pub fn nme(
    pred: &LandmarkSet,
    gt: &LandmarkSet,
    norm: Normalization,
    bbox: Option<&BBox>,
) -> Result<f64> {
    if pred.scheme != gt.scheme || pred.len() != gt.len() {
        return Err(Error::contract(format!(
            "scheme mismatch: {} vs {}",
            pred.scheme, gt.scheme
        )));
    }
    if gt.is_empty() {
        return Err(Error::contract("nme of an empty landmark set"));
    }
    let d = reference_length(gt, norm, bbox)?;
    Ok(mean_point_error(pred, gt) / d)
}

/// Mean Euclidean distance between corresponding points.
pub fn mean_point_error(pred: &LandmarkSet, gt: &LandmarkSet) -> f64 {
    let total: f64 = pred
        .points
        .iter()
        .zip(&gt.points)
        .map(|(&p, &g)| dist(p, g))
        .sum();
    total / gt.len() as f64
}

/// Fraction of images with error strictly above `threshold`.
pub fn failure_rate(per_image: &[f64], threshold: f64) -> Result<f64> {
    if per_image.is_empty() {
        return Err(Error::contract("failure rate of an empty list"));
    }
    Ok(per_image.iter().filter(|&&e| e > threshold).count() as f64 / per_image.len() as f64)
}

/// `steps` evenly spaced thresholds over `[0, max_threshold]` with the
/// fraction of images at or below each.
pub fn ced_curve(per_image: &[f64], max_threshold: f64, steps: usize) -> Result<Vec<(f64, f64)>> {
    if per_image.is_empty() {
        return Err(Error::contract("CED of an empty list"));
    }
    if steps < 2 || !(max_threshold > 0.0) {
        return Err(Error::config(
            "CED needs at least 2 steps and a positive maximum",
        ));
    }
    let n = per_image.len() as f64;
    Ok((0..steps)
        .map(|i| {
            let t = max_threshold * i as f64 / (steps - 1) as f64;
            (t, per_image.iter().filter(|&&e| e <= t).count() as f64 / n)
        })
        .collect())
}

/// Summary of an evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub normalization: Normalization,
    pub mean_nme: f64,
    pub failure_rate: f64,
    pub per_image_nme: Vec<f64>,
    pub ced_points: Vec<(f64, f64)>,
}

impl EvalReport {
    pub fn new(
        per_image_nme: Vec<f64>,
        normalization: Normalization,
        ced_max: f64,
        ced_steps: usize,
    ) -> Result<Self> {
        let failure_rate = failure_rate(&per_image_nme, FAILURE_THRESHOLD)?;
        let ced_points = ced_curve(&per_image_nme, ced_max, ced_steps)?;
        let mean_nme = per_image_nme.iter().sum::<f64>() / per_image_nme.len() as f64;
        Ok(Self {
            normalization,
            mean_nme,
            failure_rate,
            per_image_nme,
            ced_points,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report fields serialize")
    }

    /// `threshold fraction` per line.
    pub fn ced_table(&self) -> String {
        let mut s = String::new();
        for (t, f) in &self.ced_points {
            writeln!(s, "{t} {f}").unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut ChaCha8Rng, scheme: Scheme) -> LandmarkSet {
        let pts = (0..scheme.count())
            .map(|_| [rng.random_range(0.0..256.0), rng.random_range(0.0..256.0)])
            .collect();
        LandmarkSet::new(pts, scheme).unwrap()
    }

    #[test]
    fn shipped_eye_tables_parse() {
        for s in [Scheme::W68, Scheme::C29, Scheme::A19, Scheme::F98] {
            EyeReference::builtin(s).unwrap();
        }
        let w = EyeReference::builtin(Scheme::W68).unwrap();
        assert_eq!(w.left_pupil, (36..42).collect::<Vec<_>>());
        assert_eq!((w.left_corner, w.right_corner), (36, 45));
    }

    #[test]
    fn identical_sets_score_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_set(&mut rng, Scheme::W68);
        assert_eq!(
            nme(&gt, &gt, Normalization::InterOcular, None).unwrap(),
            0.0
        );
    }

    #[test]
    fn uniform_offset_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = random_set(&mut rng, Scheme::W68);
        let pred = gt.map(|p| [p[0] + 3.0, p[1] + 4.0]);
        let bbox = BBox::new(0.0, 0.0, 100.0, 100.0).unwrap();
        assert_eq!(
            nme(&pred, &gt, Normalization::FaceSize, Some(&bbox)).unwrap(),
            0.05
        );
    }

    #[test]
    fn summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = random_set(&mut rng, Scheme::W68);
        let pred = random_set(&mut rng, Scheme::W68);
        let mut total = 0.0;
        for i in 0..68 {
            total += ((pred.points[i][0] - gt.points[i][0]).powi(2)
                + (pred.points[i][1] - gt.points[i][1]).powi(2))
            .sqrt();
        }
        let (a, b) = (gt.points[36], gt.points[45]);
        let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        let got = nme(&pred, &gt, Normalization::InterOcular, None).unwrap();
        assert!((got - total / 68.0 / d).abs() < 1e-12);
    }

    #[test]
    fn degenerate_reference_rejected() {
        let gt = LandmarkSet::new(vec![[1.0, 1.0]; 68], Scheme::W68).unwrap();
        assert!(matches!(
            nme(&gt, &gt, Normalization::InterPupil, None),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            nme(&gt, &gt, Normalization::FaceSize, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn failure_is_strict() {
        assert_eq!(failure_rate(&[0.05, 0.15], 0.10).unwrap(), 0.5);
        assert_eq!(failure_rate(&[0.10, 0.02], 0.10).unwrap(), 0.0);
        assert!(failure_rate(&[], 0.1).is_err());
    }

    #[test]
    fn ced_single_image_step() {
        let c = ced_curve(&[0.05], 0.1, 11).unwrap();
        for (t, f) in c {
            assert_eq!(f, if t >= 0.05 { 1.0 } else { 0.0 }, "t={t}");
        }
        assert!(ced_curve(&[], 0.1, 5).is_err());
    }

    #[test]
    fn report_mean_and_table() {
        let r = EvalReport::new(vec![0.01, 0.2, 0.03], Normalization::InterPupil, 0.2, 3).unwrap();
        assert!((r.mean_nme - 0.08).abs() < 1e-12);
        assert!((r.failure_rate - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.ced_points.last().unwrap().1, 1.0);
        assert_eq!(r.ced_table().lines().count(), 3);
        let back: EvalReport = toml::from_str(&r.to_toml()).unwrap();
        assert_eq!(back, r);
    }
}
