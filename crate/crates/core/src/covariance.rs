//! Global covariance pooling with an iterative matrix square root.
//!
//! The square root uses the coupled Newton–Schulz iteration on the
//! trace-normalized covariance, followed by multiplication with `√tr(Σ)`.
//! Only matrix products are involved, so the whole thing unrolls on the tape.
//! [`matrix_sqrt_oracle`] computes the same root from a Jacobi
//! eigendecomposition and exists for checking.

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Default number of Newton–Schulz iterations.
pub const DEFAULT_ITERATIONS: usize = 5;

/// Traces at or below this are treated as a constant feature map.
pub const DEGENERATE_TRACE: f64 = 1e-12;

const SYMMETRY_TOL: f64 = 1e-8;

/// `XᵀĪX` with `Ī = (1/N)(I − (1/N)·1)`, i.e. the biased sample covariance
/// of the rows of an `N×D` map.
pub fn centered_covariance<B: Backend>(b: &B, x: &B::Value) -> Result<B::Value> {
    let shape = b.shape(x);
    if shape.len() != 2 {
        return Err(Error::dim("centered_covariance", &shape, &[0, 0]));
    }
    let n = shape[0];
    if n < 2 {
        return Err(Error::contract(format!(
            "covariance needs at least 2 rows, got {n}"
        )));
    }
    let mean = b.mean_axis(x, 0)?;
    let centered = b.channel_add(x, &b.scale(&mean, -1.0))?;
    let gram = b.matmul(&b.transpose(&centered)?, &centered)?;
    Ok(b.scale(&gram, 1.0 / n as f64))
}

/// Result of [`newton_schulz_sqrt`].
#[derive(Clone, Debug)]
pub struct SqrtOutput<V> {
    pub y_hat: V,
    /// Set when `tr(Σ)` was too small to normalize; `y_hat` is then zero.
    pub degenerate: bool,
}

fn require_square(t: &Tensor, op: &'static str) -> Result<usize> {
    if t.rank() != 2 || t.shape()[0] != t.shape()[1] {
        return Err(Error::dim(op, t.shape(), t.shape()));
    }
    Ok(t.shape()[0])
}

fn check_symmetric(t: &Tensor, op: &'static str) -> Result<()> {
    let n = require_square(t, op)?;
    let scale = t.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in i + 1..n {
            let gap = (t.get2(i, j) - t.get2(j, i)).abs();
            if gap > SYMMETRY_TOL * scale {
                return Err(Error::contract(format!(
                    "{op}: input not symmetric at ({i},{j}), gap {gap:e}"
                )));
            }
        }
    }
    Ok(())
}

/// Square root of a symmetric PSD matrix by `k` coupled Newton–Schulz steps.
pub fn newton_schulz_sqrt<B: Backend>(
    b: &B,
    sigma: &B::Value,
    k: usize,
) -> Result<SqrtOutput<B::Value>> {
    if k == 0 {
        return Err(Error::contract(
            "Newton-Schulz needs at least one iteration",
        ));
    }
    let raw = b.value(sigma);
    check_symmetric(&raw, "newton_schulz_sqrt")?;
    let d = raw.shape()[0];
    let tr = tensor::trace(&raw)?;
    if !tr.is_finite() {
        return Err(Error::NonFinite("trace of covariance".into()));
    }
    if tr <= DEGENERATE_TRACE {
        return Ok(SqrtOutput {
            y_hat: b.constant(Tensor::zeros(&[d, d])),
            degenerate: true,
        });
    }
    let sym = b.scale(&b.add(sigma, &b.transpose(sigma)?)?, 0.5);
    let trace = b.trace(&sym)?;
    let a = b.mul_scalar(&sym, &b.recip(&trace))?;
    let three = b.constant(Tensor::diag(&vec![3.0; d]));
    let mut y = a;
    let mut z = b.constant(Tensor::eye(d));
    for _ in 0..k {
        let t = b.sub(&three, &b.matmul(&z, &y)?)?;
        let y_next = b.scale(&b.matmul(&y, &t)?, 0.5);
        z = b.scale(&b.matmul(&t, &z)?, 0.5);
        y = y_next;
    }
    Ok(SqrtOutput {
        y_hat: b.mul_scalar(&y, &b.sqrt(&trace))?,
        degenerate: false,
    })
}

/// Eager iteration state, for inspecting convergence step by step.
#[derive(Clone, Debug)]
pub struct NewtonSchulzState {
    pub y: Tensor,
    pub z: Tensor,
    pub k: usize,
    pub trace_sigma: f64,
    normalized: Tensor,
}

impl NewtonSchulzState {
    pub fn new(sigma: &Tensor) -> Result<Self> {
        check_symmetric(sigma, "NewtonSchulzState")?;
        let d = sigma.shape()[0];
        let tr = tensor::trace(sigma)?;
        if tr <= DEGENERATE_TRACE {
            return Err(Error::contract(format!(
                "trace {tr:e} too small to normalize"
            )));
        }
        let normalized = sigma.map(|v| v / tr);
        Ok(Self {
            y: normalized.clone(),
            z: Tensor::eye(d),
            k: 0,
            trace_sigma: tr,
            normalized,
        })
    }

    pub fn step(&mut self) -> Result<()> {
        let d = self.y.shape()[0];
        let zy = tensor::matmul(&self.z, &self.y)?;
        let t = Tensor::diag(&vec![3.0; d]).zip_map(&zy, "newton_schulz", |a, b| a - b)?;
        let y = tensor::matmul(&self.y, &t)?.map(|v| 0.5 * v);
        self.z = tensor::matmul(&t, &self.z)?.map(|v| 0.5 * v);
        self.y = y;
        self.k += 1;
        Ok(())
    }

    /// `‖Y_k² − Σ/tr(Σ)‖_F / ‖Σ/tr(Σ)‖_F`.
    pub fn residual(&self) -> f64 {
        let sq = tensor::matmul(&self.y, &self.y).expect("square");
        sq.rel_frobenius_diff(&self.normalized)
    }

    /// `√tr(Σ)·Y_k`.
    pub fn y_hat(&self) -> Tensor {
        let s = self.trace_sigma.sqrt();
        self.y.map(|v| v * s)
    }
}

/// Eigenvalues (ascending) and column eigenvectors of a symmetric matrix by
/// cyclic Jacobi rotations.
pub fn symmetric_eigen(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let n = require_square(a, "symmetric_eigen")?;
    let mut m: Vec<f64> = a.data().to_vec();
    let mut v = Tensor::eye(n).into_data();
    let scale = m
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[i * n + i].total_cmp(&m[j * n + j]));
    let vals = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            vecs[row * n + col] = v[row * n + src];
        }
    }
    Ok((vals, Tensor::new(&[n, n], vecs)?))
}

/// Principal square root `U·Λ^½·Uᵀ`; eigenvalues in `[-1e-6, 0)` are
/// clamped to zero, anything lower is rejected.
pub fn matrix_sqrt_oracle(sigma: &Tensor) -> Result<Tensor> {
    check_symmetric(sigma, "matrix_sqrt_oracle")?;
    let (vals, u) = symmetric_eigen(sigma)?;
    let n = vals.len();
    if let Some(&worst) = vals.iter().find(|&&l| l < -1e-6) {
        return Err(Error::contract(format!(
            "matrix is not PSD: eigenvalue {worst:e}"
        )));
    }
    let roots: Vec<f64> = vals.iter().map(|l| l.max(0.0).sqrt()).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..n).map(|k| u.get2(i, k) * roots[k] * u.get2(j, k)).sum();
        }
    }
    Tensor::new(&[n, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::backend::Eager;
    use crate::gradcheck::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
        let m = Tensor::new(
            &[d, d],
            (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let mmt = tensor::matmul(&m, &tensor::transpose(&m).unwrap()).unwrap();
        mmt.zip_map(&Tensor::diag(&vec![0.1; d]), "add", |a, b| a + b)
            .unwrap()
    }

    #[test]
    fn constant_rows_give_zero_covariance() {
        let x = Tensor::from_rows(&vec![vec![2.0, -1.0, 4.0]; 5]).unwrap();
        let s = centered_covariance(&Eager, &x).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_covariance() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let s = centered_covariance(&Eager, &x).unwrap();
        // (1/N)·Σ(xᵢ−x̄)(xᵢ−x̄)ᵀ = (1/2)·(1 + 1)
        assert_eq!(s.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn covariance_matches_centering_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, d) = (10, 4);
        let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Tensor::new(&[n, d], data.clone()).unwrap();
        let s = centered_covariance(&Eager, &x).unwrap();
        let mean: Vec<f64> = (0..d)
            .map(|j| (0..n).map(|i| data[i * d + j]).sum::<f64>() / n as f64)
            .collect();
        for a in 0..d {
            for b in 0..d {
                let want: f64 = (0..n)
                    .map(|i| (data[i * d + a] - mean[a]) * (data[i * d + b] - mean[b]))
                    .sum::<f64>()
                    / n as f64;
                assert!((s.get2(a, b) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_row_rejected() {
        let r = centered_covariance(&Eager, &Tensor::zeros(&[1, 3]));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn identity_root_is_identity() {
        let out = newton_schulz_sqrt(&Eager, &Tensor::eye(4), 5).unwrap();
        assert!(!out.degenerate);
        // eigenvalue 1/4 of the normalized matrix is still converging at k = 5
        assert!(out.y_hat.max_abs_diff(&Tensor::eye(4)) < 1e-5);
        let out = newton_schulz_sqrt(&Eager, &Tensor::eye(4), 7).unwrap();
        assert!(out.y_hat.max_abs_diff(&Tensor::eye(4)) < 1e-10);
    }

    #[test]
    fn scalar_root() {
        let out = newton_schulz_sqrt(&Eager, &Tensor::diag(&[4.0]), 5).unwrap();
        assert!((out.y_hat.item() - 2.0).abs() < 1e-8);
    }

    #[test]
    fn random_spd_against_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = random_spd(&mut rng, 8);
        let oracle = matrix_sqrt_oracle(&s).unwrap();
        let y = newton_schulz_sqrt(&Eager, &s, 10).unwrap().y_hat;
        let y2 = tensor::matmul(&y, &y).unwrap();
        assert!(y2.rel_frobenius_diff(&s) < 1e-3);
        assert!(y.rel_frobenius_diff(&oracle) < 1e-3);
        let coarse = newton_schulz_sqrt(&Eager, &s, 5).unwrap().y_hat;
        assert!(coarse.rel_frobenius_diff(&oracle) > y.rel_frobenius_diff(&oracle));
    }

    #[test]
    fn zero_trace_is_flagged() {
        let out = newton_schulz_sqrt(&Eager, &Tensor::zeros(&[3, 3]), 5).unwrap();
        assert!(out.degenerate);
        assert!(out.y_hat.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn asymmetric_input_rejected() {
        let a = Tensor::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            newton_schulz_sqrt(&Eager, &a, 5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn oracle_closed_forms() {
        assert!(
            matrix_sqrt_oracle(&Tensor::eye(3))
                .unwrap()
                .max_abs_diff(&Tensor::eye(3))
                < 1e-14
        );
        let r = matrix_sqrt_oracle(&Tensor::diag(&[9.0, 4.0])).unwrap();
        assert!(r.max_abs_diff(&Tensor::diag(&[3.0, 2.0])) < 1e-14);
        let neg = Tensor::diag(&[1.0, -0.1]);
        assert!(matrix_sqrt_oracle(&neg).is_err());
    }

    #[test]
    fn oracle_self_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = random_spd(&mut rng, 6);
        let r = matrix_sqrt_oracle(&s).unwrap();
        assert!(tensor::matmul(&r, &r).unwrap().rel_frobenius_diff(&s) < 1e-9);
    }

    #[test]
    fn state_residual_decreases_late() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = random_spd(&mut rng, 6);
        let mut st = NewtonSchulzState::new(&s).unwrap();
        let mut res = Vec::new();
        for _ in 0..5 {
            st.step().unwrap();
            res.push(st.residual());
        }
        assert!(res[2] >= res[3] && res[3] >= res[4], "{res:?}");
        let via_fn = newton_schulz_sqrt(&Eager, &s, 5).unwrap().y_hat;
        assert!(st.y_hat().max_abs_diff(&via_fn) < 1e-12);
    }

    #[test]
    fn gradient_through_covariance_and_root() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::new(
            &[6, 3],
            (0..18).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let err = finite_diff_check(
            |g: &Graph, x| {
                let s = centered_covariance(g, &x)?;
                Ok(g.sum(&newton_schulz_sqrt(g, &s, 5)?.y_hat))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
