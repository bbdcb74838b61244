//! Landmark coordinate sets and the annotation schemes they follow.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Annotation layout of a landmark set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// 68-point layout (300W).
    W68,
    /// 29-point layout (COFW).
    C29,
    /// 19-point layout (AFLW).
    A19,
    /// 98-point layout (WFLW).
    F98,
    /// Any other point count; has no boundary table or eye references.
    Custom(usize),
}

impl Scheme {
    pub fn count(self) -> usize {
        match self {
            Scheme::W68 => 68,
            Scheme::C29 => 29,
            Scheme::A19 => 19,
            Scheme::F98 => 98,
            Scheme::Custom(n) => n,
        }
    }

    /// Named scheme with `n` points, or `Custom(n)`.
    pub fn from_count(n: usize) -> Self {
        match n {
            68 => Scheme::W68,
            29 => Scheme::C29,
            19 => Scheme::A19,
            98 => Scheme::F98,
            n => Scheme::Custom(n),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::W68 => f.write_str("w68"),
            Scheme::C29 => f.write_str("c29"),
            Scheme::A19 => f.write_str("a19"),
            Scheme::F98 => f.write_str("f98"),
            Scheme::Custom(n) => write!(f, "custom{n}"),
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "w68" | "68" => Ok(Scheme::W68),
            "c29" | "29" => Ok(Scheme::C29),
            "a19" | "19" => Ok(Scheme::A19),
            "f98" | "98" => Ok(Scheme::F98),
            other => other
                .strip_prefix("custom")
                .and_then(|n| n.parse().ok())
                .map(Scheme::Custom)
                .ok_or_else(|| Error::config(format!("unknown landmark scheme `{s}`"))),
        }
    }
}

/// Ordered 2-D points `(x, y)` in pixel units.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<[f64; 2]>,
    pub scheme: Scheme,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>, scheme: Scheme) -> Result<Self> {
        if points.len() != scheme.count() {
            return Err(Error::contract(format!(
                "scheme {scheme} expects {} points, got {}",
                scheme.count(),
                points.len()
            )));
        }
        if let Some(i) = points
            .iter()
            .position(|p| !p[0].is_finite() || !p[1].is_finite())
        {
            return Err(Error::NonFinite(format!("landmark {i}")));
        }
        Ok(Self { points, scheme })
    }

    /// Scheme inferred from the point count.
    pub fn from_points(points: Vec<[f64; 2]>) -> Result<Self> {
        let scheme = Scheme::from_count(points.len());
        Self::new(points, scheme)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Per-point flag: true when the point lies outside `[0, w-1]×[0, h-1]`.
    pub fn outside_flags(&self, width: usize, height: usize) -> Vec<bool> {
        self.points
            .iter()
            .map(|p| {
                p[0] < 0.0 || p[1] < 0.0 || p[0] > (width - 1) as f64 || p[1] > (height - 1) as f64
            })
            .collect()
    }

    pub fn map(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        Self {
            points: self.points.iter().map(|&p| f(p)).collect(),
            scheme: self.scheme,
        }
    }
}

pub(crate) fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scheme_counts_and_names() {
        for s in [
            Scheme::W68,
            Scheme::C29,
            Scheme::A19,
            Scheme::F98,
            Scheme::Custom(5),
        ] {
            assert_eq!(s.to_string().parse::<Scheme>().unwrap(), s);
            assert_eq!(Scheme::from_count(s.count()), s);
        }
        assert!("w67".parse::<Scheme>().is_err());
    }

    #[test]
    fn count_must_match() {
        assert!(LandmarkSet::new(vec![[0.0, 0.0]; 3], Scheme::A19).is_err());
        assert!(LandmarkSet::new(vec![[f64::NAN, 0.0]], Scheme::Custom(1)).is_err());
    }

    #[test]
    fn outside_points_are_flagged_not_rejected() {
        let s = LandmarkSet::from_points(vec![[-1.0, 2.0], [3.0, 3.0]]).unwrap();
        assert_eq!(s.outside_flags(4, 4), vec![true, false]);
    }
}
