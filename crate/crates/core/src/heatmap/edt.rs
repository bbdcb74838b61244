//! Exact Euclidean distance transform (Felzenszwalb–Huttenlocher).
//!
//! Squared distances are computed with two separable passes of the 1-D lower
//! envelope of parabolas, then square-rooted.

use crate::error::{Error, Result};

/// Per-pixel distance to the nearest boundary pixel, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl DistanceMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// 1-D squared distance transform of `f` into `out`; infinite entries are
/// non-sites.
fn transform_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let Some(first) = f.iter().position(|x| x.is_finite()) else {
        out.fill(f64::INFINITY);
        return;
    };
    let meet = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64)
    };
    let mut k = 0usize;
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        let mut s = meet(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = meet(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Distances from every pixel to the nearest `true` pixel of `mask`.
pub fn distance_transform(mask: &[bool], width: usize, height: usize) -> Result<DistanceMap> {
    if mask.len() != width * height {
        return Err(Error::dim(
            "distance_transform",
            &[mask.len()],
            &[height, width],
        ));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::contract("distance transform of an empty boundary"));
    }
    let n = width.max(height);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0f64; n + 1]);
    let mut grid: Vec<f64> = mask
        .iter()
        .map(|&m| if m { 0.0 } else { f64::INFINITY })
        .collect();

    let mut col = vec![0.0; height];
    let mut col_out = vec![0.0; height];
    for x in 0..width {
        for y in 0..height {
            col[y] = grid[y * width + x];
        }
        transform_1d(&col, &mut col_out, &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; width];
    for y in 0..height {
        let row = &mut grid[y * width..(y + 1) * width];
        transform_1d(row, &mut row_out, &mut v, &mut z);
        row.copy_from_slice(&row_out);
    }
    Ok(DistanceMap {
        width,
        height,
        values: grid.into_iter().map(f64::sqrt).collect(),
    })
}
