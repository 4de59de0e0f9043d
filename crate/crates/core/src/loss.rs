//! Ordinal losses over a relevance score `r ∈ [-1, 1]`.
//!
//! All three losses share a [`ThresholdVector`] splitting `[-1, 1]` into `K`
//! class segments `[θ_{y-1}, θ_y]` with sentinels `θ_0 = -1`, `θ_K = 1`:
//!
//! - **SOSL**: zero inside the segment of the true class, quadratic in the
//!   distance past whichever threshold is violated:
//!   `(θ_y − r)²·[r > θ_y] + (r − θ_{y−1})²·[r < θ_{y−1}]`.
//!   Over `r ∈ [-1, 1]` its derivative is bounded by
//!   `max(2|1 + θ_{y−1}|, 2|1 − θ_y|) ≤ 4` and its second derivative by 2.
//! - **MSE**: squared distance to the midpoint of the true segment.
//! - **PO** (proportional odds): negative log-likelihood of the true segment
//!   under a logistic link with scale `s`; the outer sentinels are mapped to
//!   probabilities 0 and 1 exactly.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLDS: [f64; 2] = [0.2, 0.7];
pub const DEFAULT_PO_SCALE: f64 = 5.0;
/// Lower clamp for the PO segment probability.
pub const PO_PROB_FLOOR: f64 = 1e-300;

/// Inner thresholds `θ_1 < … < θ_{K−1}`, strictly inside `(-1, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdVector {
    inner: Vec<f64>,
}

impl Default for ThresholdVector {
    fn default() -> Self {
        Self {
            inner: DEFAULT_THRESHOLDS.to_vec(),
        }
    }
}

impl ThresholdVector {
    pub fn new(inner: Vec<f64>) -> Result<Self> {
        if inner.is_empty() {
            return Err(Error::InvalidArgument("need at least one inner threshold".into()));
        }
        let mut prev = -1.0;
        for &t in &inner {
            if !(t > prev) || !t.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "thresholds must satisfy -1 < θ_1 < … < θ_(K-1) < 1, got {inner:?}"
                )));
            }
            prev = t;
        }
        if !(prev < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "thresholds must lie below 1, got {inner:?}"
            )));
        }
        Ok(Self { inner })
    }

    /// Number of classes `K`.
    pub fn classes(&self) -> usize {
        self.inner.len() + 1
    }

    pub fn inner(&self) -> &[f64] {
        &self.inner
    }

    /// `θ_i` for `i ∈ 0..=K`, sentinels included.
    pub fn theta(&self, i: usize) -> f64 {
        if i == 0 {
            -1.0
        } else if i == self.classes() {
            1.0
        } else {
            self.inner[i - 1]
        }
    }

    fn check_label(&self, y: u8) -> Result<usize> {
        let k = self.classes();
        if y == 0 || y as usize > k {
            return Err(Error::InvalidLabel { label: y, classes: k });
        }
        Ok(y as usize)
    }

    /// `[θ_{y−1}, θ_y]`.
    pub fn segment(&self, y: u8) -> Result<(f64, f64)> {
        let y = self.check_label(y)?;
        Ok((self.theta(y - 1), self.theta(y)))
    }

    pub fn midpoint(&self, y: u8) -> Result<f64> {
        let (lo, hi) = self.segment(y)?;
        Ok(0.5 * (lo + hi))
    }

    /// `max(2|1 + θ_{y−1}|, 2|1 − θ_y|)`: the largest SOSL slope over `r ∈ [-1, 1]`.
    pub fn sosl_slope_bound(&self, y: u8) -> Result<f64> {
        let (lo, hi) = self.segment(y)?;
        Ok((2.0 * (1.0 + lo).abs()).max(2.0 * (1.0 - hi).abs()))
    }
}

impl FromStr for ThresholdVector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let inner = crate::config::parse_list::<f64>(s)?;
        Self::new(inner)
    }
}

impl fmt::Display for ThresholdVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.inner.iter().map(|t| t.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub derivative: f64,
    /// PO only: the segment probability underflowed and was clamped.
    pub clamped: bool,
}

impl LossValue {
    fn smooth(value: f64, derivative: f64) -> Self {
        Self {
            value,
            derivative,
            clamped: false,
        }
    }
}

pub fn sosl(r: f64, y: u8, th: &ThresholdVector) -> Result<LossValue> {
    let (lo, hi) = th.segment(y)?;
    Ok(if r > hi {
        LossValue::smooth((hi - r) * (hi - r), 2.0 * (r - hi))
    } else if r < lo {
        LossValue::smooth((r - lo) * (r - lo), 2.0 * (r - lo))
    } else {
        LossValue::smooth(0.0, 0.0)
    })
}

/// Squared distance to the midpoint of the true segment.
pub fn mse_ordinal(r: f64, y: u8, th: &ThresholdVector) -> Result<LossValue> {
    let target = th.midpoint(y)?;
    Ok(LossValue::smooth((r - target) * (r - target), 2.0 * (r - target)))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-ln σ(x)`, stable for large `|x|`.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// `-ln(σ(s(θ_y − r)) − σ(s(θ_{y−1} − r)))` with `σ(s(θ_K − r)) := 1` and
/// `σ(s(θ_0 − r)) := 0`. The derivative is `s(1 − A − B)` for the upper and
/// lower cumulative probabilities `A`, `B`.
pub fn proportional_odds(r: f64, y: u8, th: &ThresholdVector, scale: f64) -> Result<LossValue> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "PO scale must be positive, got {scale}"
        )));
    }
    let yi = th.check_label(y)?;
    let k = th.classes();
    let upper = (yi < k).then(|| scale * (th.theta(yi) - r));
    let lower = (yi > 1).then(|| scale * (th.theta(yi - 1) - r));
    let a = upper.map_or(1.0, sigmoid);
    let b = lower.map_or(0.0, sigmoid);
    let derivative = scale * (1.0 - a - b);
    let (value, clamped) = match (upper, lower) {
        // K = 1 cannot happen: ThresholdVector has at least one inner threshold.
        (None, None) => (0.0, false),
        (Some(u), None) => (neg_log_sigmoid(u), false),
        // 1 − σ(l) = σ(−l)
        (None, Some(l)) => (neg_log_sigmoid(-l), false),
        (Some(_), Some(_)) => {
            let p = a - b;
            if p < PO_PROB_FLOOR {
                (-PO_PROB_FLOOR.ln(), true)
            } else {
                (-p.ln(), false)
            }
        }
    };
    Ok(LossValue {
        value,
        derivative,
        clamped,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "loss", rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Sosl,
    Mse,
    #[serde(rename = "po")]
    ProportionalOdds {
        scale: f64,
    },
}

impl LossKind {
    pub fn eval(&self, r: f64, y: u8, th: &ThresholdVector) -> Result<LossValue> {
        match *self {
            LossKind::Sosl => sosl(r, y, th),
            LossKind::Mse => mse_ordinal(r, y, th),
            LossKind::ProportionalOdds { scale } => proportional_odds(r, y, th, scale),
        }
    }

    /// Bound on `|dℓ/dr|` over `r ∈ [-1, 1]`.
    pub fn slope_bound(&self) -> f64 {
        match *self {
            LossKind::Sosl | LossKind::Mse => 4.0,
            LossKind::ProportionalOdds { scale } => scale,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Sosl => "sosl",
            LossKind::Mse => "mse",
            LossKind::ProportionalOdds { .. } => "po",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sosl" => Ok(LossKind::Sosl),
            "mse" => Ok(LossKind::Mse),
            "po" => Ok(LossKind::ProportionalOdds {
                scale: DEFAULT_PO_SCALE,
            }),
            other => Err(Error::Config(format!("unknown loss `{other}` (sosl | mse | po)"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Empirical slope and curvature of a loss over random `r ∈ [-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossConstantsReport {
    pub loss: String,
    pub samples: usize,
    pub max_abs_derivative: f64,
    /// Max of `|ℓ(r+h) − 2ℓ(r) + ℓ(r−h)| / h²` with `h = 1e-4`.
    pub max_second_difference: f64,
    /// Per class: `(y, observed max |ℓ'|, max(2|1 + θ_{y−1}|, 2|1 − θ_y|))`.
    pub per_class: Vec<(u8, f64, f64)>,
    /// SOSL only: observed slope ≤ 4, per-class slope ≤ its bound, curvature ≤ 2 + 1e-6.
    pub within_bounds: bool,
}

pub fn verify_loss_constants(
    loss: LossKind,
    th: &ThresholdVector,
    samples: usize,
    seed: u64,
) -> Result<LossConstantsReport> {
    const H: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class = Vec::new();
    let mut max_d: f64 = 0.0;
    let mut max_dd: f64 = 0.0;
    for y in 1..=th.classes() as u8 {
        let mut class_max: f64 = 0.0;
        for _ in 0..samples {
            let r: f64 = rng.random_range(-1.0..=1.0);
            let d = loss.eval(r, y, th)?.derivative.abs();
            class_max = class_max.max(d);
            let f = |x: f64| loss.eval(x, y, th).map(|v| v.value);
            let dd = ((f(r + H)? - 2.0 * f(r)? + f(r - H)?) / (H * H)).abs();
            max_dd = max_dd.max(dd);
        }
        max_d = max_d.max(class_max);
        per_class.push((y, class_max, th.sosl_slope_bound(y)?));
    }
    let within_bounds = matches!(loss, LossKind::Sosl)
        && max_d <= 4.0
        && max_dd <= 2.0 + 1e-6
        && per_class.iter().all(|&(_, seen, bound)| seen <= bound + 1e-12);
    Ok(LossConstantsReport {
        loss: loss.name().to_string(),
        samples,
        max_abs_derivative: max_d,
        max_second_difference: max_dd,
        per_class,
        within_bounds,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub r: f64,
    /// Loss for `y = 1..=K`.
    pub values: Vec<f64>,
}

/// Loss curves over `r ∈ [-1, 1]` at spacing `step` for every class.
pub fn emit_loss_curves(loss: LossKind, th: &ThresholdVector, step: f64) -> Result<Vec<CurvePoint>> {
    if !(step > 0.0 && step <= 2.0) {
        return Err(Error::InvalidArgument(format!(
            "curve step must lie in (0, 2], got {step}"
        )));
    }
    let n = (2.0 / step).round() as usize;
    (0..=n)
        .map(|i| {
            let r = -1.0 + 2.0 * i as f64 / n as f64;
            let values = (1..=th.classes() as u8)
                .map(|y| loss.eval(r, y, th).map(|v| v.value))
                .collect::<Result<Vec<_>>>()?;
            Ok(CurvePoint { r, values })
        })
        .collect()
}

pub fn curves_to_tsv(points: &[CurvePoint]) -> String {
    let classes = points.first().map_or(0, |p| p.values.len());
    let mut out = String::from("r");
    for y in 1..=classes {
        let _ = write!(out, "\tloss_y{y}");
    }
    out.push('\n');
    for p in points {
        let _ = write!(out, "{}", p.r);
        for v in &p.values {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    out
}
