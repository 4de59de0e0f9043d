//! Smooth cosine similarity.
//!
//! ```text
//! r_ε(q, d) = v_q·v_d / ((‖v_q‖ + ε)(‖v_d‖ + ε))
//! ```
//!
//! For `ε > 0` the gradient with respect to either vector is bounded by
//! `2 / (‖v‖ + ε) ≤ 2 / ε`, which keeps training stable when encoded vectors
//! approach the origin. The price is that `r_ε` also depends on the norms, so
//! it does not preserve the order induced by plain cosine similarity.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub epsilon: f64,
    /// Set only by [`SimilarityConfig::diagnostic`]; allows `ε = 0`.
    diagnostic: bool,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            diagnostic: false,
        }
    }
}

impl SimilarityConfig {
    /// Training configuration; `ε` must be positive.
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive and finite, got {epsilon}; use diagnostic mode for epsilon = 0"
            )));
        }
        Ok(Self {
            epsilon,
            diagnostic: false,
        })
    }

    /// Diagnostic configuration; `ε = 0` (plain cosine) is allowed.
    pub fn diagnostic(epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be finite and >= 0, got {epsilon}"
            )));
        }
        Ok(Self {
            epsilon,
            diagnostic: true,
        })
    }

    pub fn is_smooth(&self) -> bool {
        self.epsilon > 0.0
    }

    pub fn is_diagnostic(&self) -> bool {
        self.diagnostic
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityResult {
    pub score: f64,
    pub grad_q: Vec<f64>,
    pub grad_d: Vec<f64>,
    /// `(‖grad_q‖, ‖grad_d‖)`.
    pub grad_norms: (f64, f64),
    /// `(‖v_q‖, ‖v_d‖)`.
    pub input_norms: (f64, f64),
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Plain cosine similarity; `None` when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    (na > 0.0 && nb > 0.0).then(|| dot(a, b) / (na * nb))
}

/// Score only, without gradients.
pub fn smooth_cosine_score(v_q: &[f64], v_d: &[f64], cfg: &SimilarityConfig) -> Result<f64> {
    if v_q.len() != v_d.len() {
        return Err(Error::DimensionMismatch {
            expected: v_q.len(),
            actual: v_d.len(),
        });
    }
    let (nq, nd) = (norm(v_q), norm(v_d));
    let eps = cfg.epsilon;
    if eps == 0.0 && (nq == 0.0 || nd == 0.0) {
        return Err(Error::Singularity);
    }
    Ok(dot(v_q, v_d) / ((nq + eps) * (nd + eps)))
}

/// Score and exact gradients with respect to both vectors.
///
/// ```text
/// ∂r/∂v_q = v_d / M − r · v_q / ((‖v_q‖ + ε) ‖v_q‖),   M = (‖v_q‖ + ε)(‖v_d‖ + ε)
/// ```
///
/// and symmetrically for `v_d`. At `v_q = 0` the second term is taken at its
/// limit, zero.
pub fn smooth_cosine(v_q: &[f64], v_d: &[f64], cfg: &SimilarityConfig) -> Result<SimilarityResult> {
    if v_q.len() != v_d.len() {
        return Err(Error::DimensionMismatch {
            expected: v_q.len(),
            actual: v_d.len(),
        });
    }
    let (nq, nd) = (norm(v_q), norm(v_d));
    let eps = cfg.epsilon;
    if eps == 0.0 && (nq == 0.0 || nd == 0.0) {
        return Err(Error::Singularity);
    }
    let (sq, sd) = (nq + eps, nd + eps);
    let m = sq * sd;
    let score = dot(v_q, v_d) / m;

    let self_term = |n: f64, s: f64| if n > 0.0 { score / (s * n) } else { 0.0 };
    let (aq, ad) = (self_term(nq, sq), self_term(nd, sd));
    let grad_q: Vec<f64> = v_d.iter().zip(v_q).map(|(d, q)| d / m - aq * q).collect();
    let grad_d: Vec<f64> = v_q.iter().zip(v_d).map(|(q, d)| q / m - ad * d).collect();
    let grad_norms = (norm(&grad_q), norm(&grad_d));
    Ok(SimilarityResult {
        score,
        grad_q,
        grad_d,
        grad_norms,
        input_norms: (nq, nd),
    })
}

/// Tight per-point bound `2 / (‖v‖ + ε)` on the gradient norm with respect to `v`.
pub fn gradient_bound(epsilon: f64, v_norm: f64) -> Result<f64> {
    if !(epsilon >= 0.0 && v_norm >= 0.0) {
        return Err(Error::InvalidArgument("epsilon and norm must be non-negative".into()));
    }
    if epsilon == 0.0 && v_norm == 0.0 {
        return Err(Error::Singularity);
    }
    Ok(2.0 / (v_norm + epsilon))
}

/// Inclusive evenly spaced axis: `steps` points from `lo` to `hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

impl GridSpec {
    pub fn points(&self) -> Vec<f64> {
        match self.steps {
            0 => Vec::new(),
            1 => vec![self.lo],
            n => (0..n)
                .map(|i| self.lo + (self.hi - self.lo) * i as f64 / (n - 1) as f64)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldPoint {
    pub x1: f64,
    pub x2: f64,
    pub partial: f64,
}

/// `∂r_ε/∂x1` of `r_ε((x1, x2), fixed)` over a square grid. Points where the
/// plain cosine (`ε = 0`) is undefined carry `NaN`.
pub fn sweep_gradient_field(cfg: &SimilarityConfig, grid: &GridSpec, fixed: &[f64]) -> Result<Vec<FieldPoint>> {
    if fixed.len() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            actual: fixed.len(),
        });
    }
    let axis = grid.points();
    let mut out = Vec::with_capacity(axis.len() * axis.len());
    for &x1 in &axis {
        for &x2 in &axis {
            let partial = match smooth_cosine(&[x1, x2], fixed, cfg) {
                Ok(res) => res.grad_q[0],
                Err(Error::Singularity) => f64::NAN,
                Err(e) => return Err(e),
            };
            out.push(FieldPoint { x1, x2, partial });
        }
    }
    Ok(out)
}

pub fn field_to_tsv(points: &[FieldPoint]) -> String {
    let mut out = String::from("x1\tx2\tpartial\n");
    for p in points {
        let _ = writeln!(out, "{}\t{}\t{}", p.x1, p.x2, p.partial);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_vectors_plain_cosine() {
        let cfg = SimilarityConfig::diagnostic(0.0).unwrap();
        let r = smooth_cosine(&[1.0, 1.0], &[1.0, 1.0], &cfg).unwrap();
        assert!((r.score - 1.0).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_vectors_score_zero() {
        for eps in [0.0, 0.05, 1.0, 7.0] {
            let cfg = SimilarityConfig::diagnostic(eps).unwrap();
            assert_eq!(smooth_cosine(&[2.0, 0.0], &[0.0, 3.0], &cfg).unwrap().score, 0.0);
        }
    }

    #[test]
    fn unit_ones_with_epsilon_one() {
        let cfg = SimilarityConfig::new(1.0).unwrap();
        let r = smooth_cosine(&[1.0, 1.0], &[1.0, 1.0], &cfg).unwrap();
        let expected = 2.0 / (2f64.sqrt() + 1.0).powi(2);
        assert!((r.score - expected).abs() < 1e-15);
        assert!((r.score - 0.3431457505076198).abs() < 1e-15);
    }

    #[test]
    fn singularity_and_dimension_errors() {
        let cfg = SimilarityConfig::diagnostic(0.0).unwrap();
        assert!(matches!(
            smooth_cosine(&[0.0, 0.0], &[1.0, 0.0], &cfg),
            Err(Error::Singularity)
        ));
        let cfg = SimilarityConfig::new(0.5).unwrap();
        assert!(matches!(
            smooth_cosine(&[1.0], &[1.0, 0.0], &cfg),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(SimilarityConfig::new(0.0).is_err());
        assert!(SimilarityConfig::diagnostic(-1.0).is_err());
    }

    #[test]
    fn zero_vector_gradient_uses_limit() {
        let cfg = SimilarityConfig::new(0.5).unwrap();
        let r = smooth_cosine(&[0.0, 0.0], &[3.0, 4.0], &cfg).unwrap();
        assert_eq!(r.score, 0.0);
        // grad_q = v_d / M with M = 0.5 * 5.5
        assert!((r.grad_q[0] - 3.0 / 2.75).abs() < 1e-15);
        assert!((r.grad_q[1] - 4.0 / 2.75).abs() < 1e-15);
        assert_eq!(r.grad_d, vec![0.0, 0.0]);
    }

    #[test]
    fn gradient_bound_examples() {
        assert_eq!(gradient_bound(0.5, 0.0).unwrap(), 4.0);
        assert_eq!(gradient_bound(1.0, 1.0).unwrap(), 1.0);
        assert!(gradient_bound(0.0, 0.0).is_err());
        let mut last = f64::INFINITY;
        for eps in [0.1, 1.0, 10.0, 100.0, 1e6] {
            let b = gradient_bound(eps, 0.3).unwrap();
            assert!(b < last);
            last = b;
        }
    }

    #[test]
    fn field_is_bounded_and_symmetric_at_diagonal() {
        let cfg = SimilarityConfig::new(0.05).unwrap();
        let grid = GridSpec {
            lo: -2.0,
            hi: 2.0,
            steps: 81,
        };
        let field = sweep_gradient_field(&cfg, &grid, &[1.0, 1.0]).unwrap();
        assert_eq!(field.len(), 81 * 81);
        let max = field.iter().map(|p| p.partial.abs()).fold(0.0, f64::max);
        assert!(max.is_finite() && max <= 2.0 / 0.05, "{max}");

        for eps in [0.05, 0.2, 0.5, 1.0] {
            let cfg = SimilarityConfig::new(eps).unwrap();
            let r = smooth_cosine(&[1.0, 1.0], &[1.0, 1.0], &cfg).unwrap();
            assert_eq!(r.grad_q[0], r.grad_q[1]);
        }
    }

    #[test]
    fn plain_cosine_explodes_near_origin() {
        let cfg = SimilarityConfig::diagnostic(0.0).unwrap();
        let r = smooth_cosine(&[1e-4, 0.0], &[1.0, 1.0], &cfg).unwrap();
        assert!(r.grad_norms.0 > 1e3, "{}", r.grad_norms.0);
        let tsv = field_to_tsv(
            &sweep_gradient_field(
                &cfg,
                &GridSpec {
                    lo: -1.0,
                    hi: 1.0,
                    steps: 3,
                },
                &[1.0, 1.0],
            )
            .unwrap(),
        );
        assert!(tsv.starts_with("x1\tx2\tpartial\n"));
        assert!(tsv.contains("0\t0\tNaN"));
    }

    #[test]
    fn unit_inputs_scale_cosine() {
        let cfg = SimilarityConfig::new(0.3).unwrap();
        let a = [0.6, 0.8, 0.0];
        let b = [0.0, 0.6, 0.8];
        let r = smooth_cosine(&a, &b, &cfg).unwrap();
        let c = cosine(&a, &b).unwrap();
        assert!((r.score - c / 1.3f64.powi(2)).abs() < 1e-15);
    }

    /// Frozen witness from a randomized search over [-1, 1]^3 (ε = 1): `z1` is
    /// better aligned with `x`, `z2` is longer and wins under smoothing.
    #[test]
    fn not_order_preserving_witness() {
        let cfg = SimilarityConfig::new(1.0).unwrap();
        let x = [0.145, -0.607, 0.716];
        let z1 = [-0.029, -0.158, 0.265];
        let z2 = [-0.672, -0.946, 0.35];
        assert!(cosine(&x, &z1).unwrap() > cosine(&x, &z2).unwrap());
        assert!(smooth_cosine_score(&x, &z1, &cfg).unwrap() < smooth_cosine_score(&x, &z2, &cfg).unwrap());
    }

    proptest! {
        #[test]
        fn gradients_respect_bound(
            q in prop::collection::vec(-3.0f64..3.0, 4),
            d in prop::collection::vec(-3.0f64..3.0, 4),
            eps in 0.01f64..3.0,
        ) {
            let cfg = SimilarityConfig::new(eps).unwrap();
            let r = smooth_cosine(&q, &d, &cfg).unwrap();
            prop_assert!(r.score.abs() <= 1.0);
            let cap = (r.input_norms.0 * r.input_norms.1) / ((r.input_norms.0 + eps) * (r.input_norms.1 + eps));
            prop_assert!(r.score.abs() <= cap + 1e-15);
            prop_assert!(r.grad_norms.0 <= gradient_bound(eps, r.input_norms.0).unwrap() + 1e-12);
            prop_assert!(r.grad_norms.1 <= gradient_bound(eps, r.input_norms.1).unwrap() + 1e-12);
        }

        #[test]
        fn converges_to_cosine(
            q in prop::collection::vec(0.1f64..3.0, 3),
            d in prop::collection::vec(-3.0f64..3.0, 3),
        ) {
            let c = cosine(&q, &d).unwrap();
            let mut last = f64::INFINITY;
            for eps in [1e-1, 1e-3, 1e-6] {
                let r = smooth_cosine_score(&q, &d, &SimilarityConfig::new(eps).unwrap()).unwrap();
                let gap = (r - c).abs();
                prop_assert!(gap <= last + 1e-15);
                last = gap;
            }
            prop_assert!(last < 1e-4);
        }
    }
}
