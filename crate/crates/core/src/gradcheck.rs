//! Numerical oracles: central finite differences, literal metric definitions
//! and a fine-grid scan of the SOSL derivative.
//!
//! Nothing in here calls into the metric code, and derivative checks compare
//! analytic gradients against differences of forward values only.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{MR, SR};
use crate::encoder::{encode, encode_backward, DualEncoder, EmbeddingTable};
use crate::error::{Error, Result};
use crate::loss::{sosl, LossKind, ThresholdVector};
use crate::metrics::{MetricReport, RankedList};
use crate::optim::{GradientPacket, TableId};
use crate::similarity::{smooth_cosine, SimilarityConfig};
use crate::trainer::{accumulate_pair_gradient, pair_loss};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Relative tolerance for gradients through the whole model.
pub const COMPOSED_TOLERANCE: f64 = 1e-4;
/// Relative tolerance for standalone scalar functions.
pub const SCALAR_TOLERANCE: f64 = 1e-6;

/// `(f(x + h e_i) − f(x − h e_i)) / 2h` for every coordinate.
pub fn fd_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle(format!(
                "function not finite around coordinate {i}: f(x+h) = {plus}, f(x-h) = {minus}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdCoordinate {
    pub analytic: f64,
    pub numeric: f64,
    pub abs_error: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub coordinates: Vec<FdCoordinate>,
    pub max_rel_error: f64,
    pub step: f64,
}

impl FdReport {
    pub fn compare(analytic: &[f64], numeric: &[f64], step: f64) -> Result<Self> {
        if analytic.len() != numeric.len() {
            return Err(Error::DimensionMismatch {
                expected: analytic.len(),
                actual: numeric.len(),
            });
        }
        let coordinates: Vec<FdCoordinate> = analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| {
                let abs_error = (a - n).abs();
                FdCoordinate {
                    analytic: a,
                    numeric: n,
                    abs_error,
                    rel_error: abs_error / a.abs().max(n.abs()).max(1e-12),
                }
            })
            .collect();
        let max_rel_error = coordinates.iter().map(|c| c.rel_error).fold(0.0, f64::max);
        Ok(Self {
            coordinates,
            max_rel_error,
            step,
        })
    }

    /// Folds several reports into one, keeping every coordinate.
    pub fn combine(reports: impl IntoIterator<Item = FdReport>) -> Option<Self> {
        let mut iter = reports.into_iter();
        let mut acc = iter.next()?;
        for r in iter {
            acc.max_rel_error = acc.max_rel_error.max(r.max_rel_error);
            acc.coordinates.extend(r.coordinates);
        }
        Some(acc)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// One named entry of [`run_suite`].
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub report: FdReport,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

pub fn suite_summary(entries: &[SuiteEntry]) -> String {
    let mut out = String::from("check\tcoordinates\tmax_rel_error\ttolerance\tstatus\n");
    for e in entries {
        let _ = writeln!(
            out,
            "{}\t{}\t{:.3e}\t{:.0e}\t{}",
            e.name,
            e.report.coordinates.len(),
            e.report.max_rel_error,
            e.tolerance,
            if e.passes() { "ok" } else { "FAIL" }
        );
    }
    out
}

fn random_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Smooth cosine gradients with respect to both inputs.
pub fn check_similarity(instances: usize, seed: u64, h: f64) -> Result<FdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(instances);
    for _ in 0..instances {
        let dim = rng.random_range(1..=8);
        let eps = rng.random_range(0.05..2.0);
        let cfg = SimilarityConfig::new(eps)?;
        let q = random_vec(&mut rng, dim, 2.0);
        let d = random_vec(&mut rng, dim, 2.0);
        let analytic = smooth_cosine(&q, &d, &cfg)?;
        let mut joint = q.clone();
        joint.extend(&d);
        let numeric = fd_gradient(
            |x| {
                let (a, b) = x.split_at(dim);
                smooth_cosine(a, b, &cfg).map_or(f64::NAN, |s| s.score)
            },
            &joint,
            h,
        )?;
        let mut grad = analytic.grad_q;
        grad.extend(analytic.grad_d);
        reports.push(FdReport::compare(&grad, &numeric, h)?);
    }
    Ok(FdReport::combine(reports).expect("at least one instance"))
}

/// Scores at least `margin` away from every threshold.
fn score_off_kinks(rng: &mut ChaCha8Rng, th: &ThresholdVector, margin: f64) -> f64 {
    loop {
        let r: f64 = rng.random_range(-1.0..1.0);
        if th.inner().iter().all(|t| (r - t).abs() > margin) {
            return r;
        }
    }
}

/// `dℓ/dr` of a loss at random scores and labels.
pub fn check_loss(loss: LossKind, instances: usize, seed: u64, h: f64) -> Result<FdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(instances);
    for _ in 0..instances {
        let t1 = rng.random_range(-0.8..0.6);
        let t2 = rng.random_range(t1 + 0.1..0.9);
        let th = ThresholdVector::new(vec![t1, t2])?;
        let y = rng.random_range(1..=3u8);
        let r = score_off_kinks(&mut rng, &th, 1e3 * h);
        let analytic = loss.eval(r, y, &th)?.derivative;
        let numeric = fd_gradient(|x| loss.eval(x[0], y, &th).map_or(f64::NAN, |v| v.value), &[r], h)?;
        reports.push(FdReport::compare(&[analytic], &numeric, h)?);
    }
    Ok(FdReport::combine(reports).expect("at least one instance"))
}

/// Gradient of `u · encode(tokens)` with respect to the embedding table.
pub fn check_encoder(instances: usize, seed: u64, h: f64) -> Result<FdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(instances);
    for _ in 0..instances {
        let vocab = rng.random_range(2..=10usize);
        let dim = rng.random_range(1..=6usize);
        let data = random_vec(&mut rng, vocab * dim, 1.5);
        let table = EmbeddingTable::from_rows("x", vocab, dim, data.clone())?;
        let len = rng.random_range(1..=5usize);
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..vocab as u32)).collect();
        let upstream = random_vec(&mut rng, dim, 1.0);

        let cached = encode(&table, &tokens)?;
        let packet = encode_backward(&table, TableId::Query, &tokens, &cached, &upstream)?;
        let analytic = flatten(&packet, TableId::Query, vocab, dim);
        let numeric = fd_gradient(
            |x| {
                let t = EmbeddingTable::from_rows("x", vocab, dim, x.to_vec()).expect("shape fixed");
                let v = encode(&t, &tokens).expect("tokens in range");
                v.values.iter().zip(&upstream).map(|(a, b)| a * b).sum()
            },
            &data,
            h,
        )?;
        reports.push(FdReport::compare(&analytic, &numeric, h)?);
    }
    Ok(FdReport::combine(reports).expect("at least one instance"))
}

fn flatten(packet: &GradientPacket, table: TableId, rows: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * dim];
    for (t, row, values) in packet.iter() {
        if t == table {
            out[row as usize * dim..(row as usize + 1) * dim].copy_from_slice(values);
        }
    }
    out
}

fn model_params(model: &DualEncoder) -> Vec<f64> {
    let mut x = model.query.as_slice().to_vec();
    x.extend_from_slice(model.document.as_slice());
    x
}

fn set_model_params(model: &mut DualEncoder, x: &[f64]) {
    let split = model.query.as_slice().len();
    model.query.as_mut_slice().copy_from_slice(&x[..split]);
    model.document.as_mut_slice().copy_from_slice(&x[split..]);
}

/// Full pipeline `ℓ(r(encode(q), encode(d)), y)` on a micro model with
/// `dim = 4`, vocabularies of 10 and 3-token texts, over every embedding
/// coordinate of both tables.
pub fn check_pipeline(loss: LossKind, epsilon: f64, instances: usize, seed: u64, h: f64) -> Result<FdReport> {
    const VOCAB: usize = 10;
    const DIM: usize = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sim = SimilarityConfig::new(epsilon)?;
    let th = ThresholdVector::default();
    let mut reports = Vec::with_capacity(instances);
    while reports.len() < instances {
        let mut model = DualEncoder::init(VOCAB, VOCAB, DIM, rng.random(), 1.0)?;
        let q: Vec<u32> = (0..3).map(|_| rng.random_range(0..VOCAB as u32)).collect();
        let d: Vec<u32> = (0..3).map(|_| rng.random_range(0..VOCAB as u32)).collect();
        let y = rng.random_range(1..=3u8);

        let mut packet = GradientPacket::new();
        let pg = accumulate_pair_gradient(&model, &q, &d, y, loss, &th, &sim, &mut packet, 1.0)?;
        // Finite differences straddling a SOSL kink are only first-order accurate.
        if th.inner().iter().any(|t| (pg.score - t).abs() < 1e-3) {
            continue;
        }
        let mut analytic = flatten(&packet, TableId::Query, VOCAB, DIM);
        analytic.extend(flatten(&packet, TableId::Document, VOCAB, DIM));
        let x = model_params(&model);
        let numeric = fd_gradient(
            |p| {
                set_model_params(&mut model, p);
                pair_loss(&model, &q, &d, y, loss, &th, &sim).unwrap_or(f64::NAN)
            },
            &x,
            h,
        )?;
        reports.push(FdReport::compare(&analytic, &numeric, h)?);
    }
    Ok(FdReport::combine(reports).expect("at least one instance"))
}

/// Every derivative check, `instances` random cases each.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let h = DEFAULT_STEP;
    let po = LossKind::ProportionalOdds {
        scale: crate::loss::DEFAULT_PO_SCALE,
    };
    let mut entries = vec![
        SuiteEntry {
            name: "scs".into(),
            report: check_similarity(instances, seed, h)?,
            tolerance: COMPOSED_TOLERANCE,
        },
        SuiteEntry {
            name: "encoder".into(),
            report: check_encoder(instances, seed.wrapping_add(1), h)?,
            tolerance: COMPOSED_TOLERANCE,
        },
    ];
    for (i, loss) in [LossKind::Sosl, LossKind::Mse, po].into_iter().enumerate() {
        entries.push(SuiteEntry {
            name: format!("loss_{}", loss.name()),
            report: check_loss(loss, instances, seed.wrapping_add(2 + i as u64), h)?,
            tolerance: SCALAR_TOLERANCE,
        });
    }
    for (i, loss) in [LossKind::Sosl, LossKind::Mse, po].into_iter().enumerate() {
        entries.push(SuiteEntry {
            name: format!("pipeline_{}", loss.name()),
            report: check_pipeline(loss, 0.5, instances, seed.wrapping_add(5 + i as u64), h)?,
            tolerance: COMPOSED_TOLERANCE,
        });
    }
    Ok(entries)
}

/// Metric values of a single ranked list computed straight from the
/// definitions. Contribution counts are 1 where a metric is defined, else 0.
pub fn brute_force_metrics(rl: &RankedList) -> MetricReport {
    let labels: Vec<u8> = rl.entries.iter().map(|e| e.label).collect();
    let n = labels.len();

    let mut mr_position = None;
    for i in 0..n {
        if labels[i] == MR {
            mr_position = Some(i + 1);
            break;
        }
    }
    let mut first_relevant = None;
    for i in 0..n {
        if labels[i] == SR || labels[i] == MR {
            first_relevant = Some(i + 1);
            break;
        }
    }

    let mut relevant_top5 = 0.0;
    for i in 0..n.min(5) {
        if labels[i] >= SR {
            relevant_top5 += 1.0;
        }
    }

    let dcg5 = |order: &[u8]| {
        let mut total = 0.0;
        for (i, &y) in order.iter().enumerate().take(5) {
            total += (2f64.powi(y as i32 - 1) - 1.0) / ((i + 1) as f64 + 1.0).log2();
        }
        total
    };
    let idcg = max_dcg_over_orderings(&labels, &dcg5);
    let ndcg = if idcg > 0.0 { dcg5(&labels) / idcg } else { 0.0 };

    let mut precisions = Vec::new();
    for i in 0..n {
        if labels[i] >= SR {
            let mut hits = 0.0;
            for j in 0..=i {
                if labels[j] >= SR {
                    hits += 1.0;
                }
            }
            precisions.push(hits / (i + 1) as f64);
        }
    }
    let ap = if precisions.is_empty() {
        None
    } else {
        Some(precisions.iter().sum::<f64>() / precisions.len() as f64)
    };

    let defined = |v: Option<f64>| (v.unwrap_or(0.0), v.is_some() as usize);
    let (p1, c1) = defined(mr_position.map(|p| if p <= 1 { 1.0 } else { 0.0 }));
    let (p5, c5) = defined(mr_position.map(|p| if p <= 5 { 1.0 } else { 0.0 }));
    let (map, cmap) = defined(ap);
    let (mrr_mr, cmm) = defined(mr_position.map(|p| 1.0 / p as f64));
    let (mrr_r, cmr) = defined(first_relevant.map(|p| 1.0 / p as f64));
    MetricReport {
        p_mr_at_1: p1,
        p_mr_at_5: p5,
        p_r_at_5: relevant_top5 / 5.0,
        ndcg_at_5: ndcg,
        map,
        mrr_mr,
        mrr_r,
        n_queries: [c1, c5, 1, 1, cmap, cmm, cmr],
    }
}

/// Largest DCG over every ordering of `labels` (Heap's algorithm) for up to
/// 8 entries; longer lists fall back to the descending sort.
fn max_dcg_over_orderings(labels: &[u8], dcg: &dyn Fn(&[u8]) -> f64) -> f64 {
    let mut a = labels.to_vec();
    if a.len() > 8 {
        a.sort_unstable_by(|x, y| y.cmp(x));
        return dcg(&a);
    }
    let n = a.len();
    let mut best = dcg(&a);
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            best = best.max(dcg(&a));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothnessReport {
    pub step: f64,
    /// `(y, max |dℓ/dr| over [-1, 1], tight bound)`.
    pub per_class: Vec<(u8, f64, f64)>,
    pub max_abs_derivative: f64,
    /// Where the largest derivative occurs, as `(y, r)`.
    pub argmax: (u8, f64),
    /// Largest derivative change between neighbouring grid points.
    pub max_jump: f64,
    /// Largest `|ℓ'(r + step) − ℓ'(r)| / step`.
    pub max_second_difference: f64,
    /// Largest gap between the analytic derivative and a central difference
    /// of the loss value (step `min(step / 100, 1e-5)`).
    pub max_fd_mismatch: f64,
    pub passes: bool,
}

/// Scans SOSL on `r ∈ [-1 − margin, 1 + margin]` with spacing `step`.
///
/// Checks that the derivative never jumps by more than `2 · step` (a bounded
/// second derivative, so no kink in the first) and that on `[-1, 1]` it stays
/// within `max(2|1 + θ_{y−1}|, 2|1 − θ_y|) ≤ 4`.
pub fn check_sosl_smoothness(th: &ThresholdVector, step: f64) -> Result<SmoothnessReport> {
    if !(step > 0.0 && step < 0.5) {
        return Err(Error::InvalidArgument(format!(
            "grid step must lie in (0, 0.5), got {step}"
        )));
    }
    let margin = 0.1;
    let half = ((1.0 + margin) / step).ceil() as i64;
    let fd_h = (step * 1e-2).min(1e-5);
    let mut per_class = Vec::new();
    let mut max_abs = 0.0;
    let mut argmax = (1u8, 0.0);
    let mut max_jump: f64 = 0.0;
    let mut max_fd: f64 = 0.0;
    let mut passes = true;
    for y in 1..=th.classes() as u8 {
        let bound = th.sosl_slope_bound(y)?;
        let mut class_max: f64 = 0.0;
        let mut prev: Option<f64> = None;
        // ±1 explicitly, since `k · step` need not land on them.
        let grid = (-half..=half)
            .map(|k| k as f64 * step)
            .chain([-1.0, 1.0])
            .collect::<Vec<_>>();
        for (idx, &r) in grid.iter().enumerate() {
            let d = sosl(r, y, th)?.derivative;
            if (-1.0..=1.0).contains(&r) {
                if d.abs() > class_max {
                    class_max = d.abs();
                }
                if d.abs() > max_abs {
                    max_abs = d.abs();
                    argmax = (y, r);
                }
            }
            if idx <= 2 * half as usize {
                if let Some(p) = prev {
                    max_jump = max_jump.max((d - p).abs());
                }
                prev = Some(d);
            }
            let value = |x: f64| sosl(x, y, th).map_or(f64::NAN, |v| v.value);
            let numeric = (value(r + fd_h) - value(r - fd_h)) / (2.0 * fd_h);
            max_fd = max_fd.max((numeric - d).abs());
        }
        passes &= class_max <= bound + 1e-12 && bound <= 4.0;
        per_class.push((y, class_max, bound));
    }
    let max_second_difference = max_jump / step;
    passes &= max_jump <= 2.0 * step * (1.0 + 1e-9) + 1e-12;
    // The second derivative jumps by 2 at each threshold, so a central
    // difference straddling one is off by up to h.
    passes &= max_fd <= 2.0 * fd_h;
    Ok(SmoothnessReport {
        step,
        per_class,
        max_abs_derivative: max_abs,
        argmax,
        max_jump,
        max_second_difference,
        max_fd_mismatch: max_fd,
        passes,
    })
}
