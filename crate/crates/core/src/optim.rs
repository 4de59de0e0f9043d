//! Gradient packets and parameter update rules.
//!
//! Gradients are sparse: a packet maps `(table, row)` to a row gradient and
//! only those rows are touched by an update. Iteration is always in key order
//! so updates are reproducible bit-for-bit.
//!
//! Adam here is the *lazy* sparse variant: first and second moments of rows
//! absent from a packet are neither decayed nor applied. This diverges from
//! dense Adam, which would keep moving rows with stale momentum; bias
//! correction still uses the global step count.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TableId {
    Query,
    Document,
}

impl fmt::Display for TableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TableId::Query => f.write_str("query"),
            TableId::Document => f.write_str("document"),
        }
    }
}

/// Anything holding trainable embedding rows.
pub trait ParameterStore {
    /// `(rows, dim)` of the table.
    fn shape(&self, table: TableId) -> (usize, usize);
    fn row_mut(&mut self, table: TableId, row: u32) -> &mut [f64];
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientPacket {
    entries: BTreeMap<(TableId, u32), Vec<f64>>,
    pub step_id: u64,
}

impl GradientPacket {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `scale * values` into the row gradient for `(table, row)`.
    pub fn accumulate_scaled(&mut self, table: TableId, row: u32, values: &[f64], scale: f64) {
        let slot = self
            .entries
            .entry((table, row))
            .or_insert_with(|| vec![0.0; values.len()]);
        debug_assert_eq!(slot.len(), values.len());
        for (s, v) in slot.iter_mut().zip(values) {
            *s += scale * v;
        }
    }

    pub fn accumulate(&mut self, table: TableId, row: u32, values: &[f64]) {
        self.accumulate_scaled(table, row, values, 1.0);
    }

    /// Adds every entry of `other`, in key order.
    pub fn merge(&mut self, other: &GradientPacket) {
        for (&(table, row), values) in &other.entries {
            self.accumulate(table, row, values);
        }
    }

    pub fn get(&self, table: TableId, row: u32) -> Option<&[f64]> {
        self.entries.get(&(table, row)).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (TableId, u32, &[f64])> {
        self.entries.iter().map(|(&(t, r), v)| (t, r, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.entries.values_mut().flatten() {
            *v *= factor;
        }
    }

    /// `sqrt(Σ ‖row‖²)` accumulated in key order.
    pub fn global_norm(&self) -> f64 {
        self.entries.values().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_row_norm(&self) -> f64 {
        self.entries
            .values()
            .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// First non-finite entry, if any.
    pub fn check_finite(&self) -> Result<()> {
        for (&(table, row), values) in &self.entries {
            if let Some(j) = values.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(format!("{table}[{row}][{j}]")));
            }
        }
        Ok(())
    }

    /// Dense copy: one full matrix per table plus a mask of the rows that were
    /// present in the packet.
    pub fn densify(&self, shapes: &[(TableId, usize, usize)]) -> DenseGradients {
        let mut tables = BTreeMap::new();
        for &(table, rows, dim) in shapes {
            tables.insert(
                table,
                DenseTable {
                    dim,
                    values: vec![0.0; rows * dim],
                    touched: vec![false; rows],
                },
            );
        }
        for (&(table, row), values) in &self.entries {
            let t = tables.get_mut(&table).expect("shape given for every table");
            let start = row as usize * t.dim;
            t.values[start..start + t.dim].copy_from_slice(values);
            t.touched[row as usize] = true;
        }
        DenseGradients { tables }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTable {
    pub dim: usize,
    pub values: Vec<f64>,
    pub touched: Vec<bool>,
}

/// Full-matrix gradients, used as the dense reference for sparse updates.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGradients {
    pub tables: BTreeMap<TableId, DenseTable>,
}

/// Rescales `grads` to norm `threshold` when its global norm exceeds it.
///
/// Norms within a relative `1e-12` of the threshold are left alone, which
/// makes the operation idempotent under rounding.
pub fn clip_gradients(grads: &GradientPacket, threshold: f64) -> Result<GradientPacket> {
    let mut out = grads.clone();
    clip_in_place(&mut out, threshold)?;
    Ok(out)
}

/// In-place variant of [`clip_gradients`]; returns whether the packet was scaled.
pub fn clip_in_place(grads: &mut GradientPacket, threshold: f64) -> Result<bool> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "clip threshold must be positive and finite, got {threshold}"
        )));
    }
    let norm = grads.global_norm();
    if norm > threshold * (1.0 + 1e-12) {
        grads.scale(threshold / norm);
        Ok(true)
    } else {
        Ok(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum OptimizerSpec {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    /// Plain SGD with step size `c / t`.
    SgdCt {
        c: f64,
    },
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec::Adam {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerSpec {
    pub fn sgd_ct(c: f64) -> Self {
        OptimizerSpec::SgdCt { c }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            OptimizerSpec::Adam { lr, beta1, beta2, eps } => {
                if !(lr >= 0.0 && lr.is_finite()) {
                    return Err(Error::Config(format!("adam lr must be >= 0, got {lr}")));
                }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return Err(Error::Config("adam betas must lie in [0, 1)".into()));
                }
                if !(eps > 0.0) {
                    return Err(Error::Config("adam eps must be > 0".into()));
                }
            }
            OptimizerSpec::SgdCt { c } => {
                if !(c >= 0.0 && c.is_finite()) {
                    return Err(Error::Config(format!("sgd_ct c must be >= 0, got {c}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimizer hyperparameters, the step counter and (for Adam) per-row moments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub spec: OptimizerSpec,
    t: u64,
    moments: BTreeMap<(TableId, u32), Moments>,
}

impl OptimizerState {
    pub fn new(spec: OptimizerSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            t: 0,
            moments: BTreeMap::new(),
        })
    }

    /// Number of applied steps.
    pub fn step(&self) -> u64 {
        self.t
    }

    /// Applies one update with the configured rule. A packet with any
    /// non-finite entry is rejected before anything changes.
    pub fn apply<P: ParameterStore>(&mut self, params: &mut P, grads: &GradientPacket) -> Result<()> {
        match self.spec {
            OptimizerSpec::Adam { .. } => self.apply_adam(params, grads),
            OptimizerSpec::SgdCt { .. } => self.apply_sgd_ct(params, grads),
        }
    }

    fn check_shapes<P: ParameterStore>(params: &P, grads: &GradientPacket) -> Result<()> {
        for (table, row, values) in grads.iter() {
            let (rows, dim) = params.shape(table);
            if row as usize >= rows {
                return Err(Error::TokenOutOfRange { id: row, size: rows });
            }
            if values.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: values.len(),
                });
            }
        }
        Ok(())
    }

    pub fn apply_adam<P: ParameterStore>(&mut self, params: &mut P, grads: &GradientPacket) -> Result<()> {
        let OptimizerSpec::Adam { lr, beta1, beta2, eps } = self.spec else {
            return Err(Error::Config("optimizer is not adam".into()));
        };
        grads.check_finite()?;
        Self::check_shapes(params, grads)?;
        self.t += 1;
        let (c1, c2) = self.bias_corrections(beta1, beta2);
        for (table, row, g) in grads.iter() {
            let m = self.moments.entry((table, row)).or_insert_with(|| Moments {
                first: vec![0.0; g.len()],
                second: vec![0.0; g.len()],
            });
            adam_row(params.row_mut(table, row), g, m, (lr, beta1, beta2, eps), (c1, c2));
        }
        Ok(())
    }

    fn bias_corrections(&self, beta1: f64, beta2: f64) -> (f64, f64) {
        let t = self.t as f64;
        (1.0 - beta1.powf(t), 1.0 - beta2.powf(t))
    }

    pub fn apply_sgd_ct<P: ParameterStore>(&mut self, params: &mut P, grads: &GradientPacket) -> Result<()> {
        let OptimizerSpec::SgdCt { c } = self.spec else {
            return Err(Error::Config("optimizer is not sgd_ct".into()));
        };
        grads.check_finite()?;
        Self::check_shapes(params, grads)?;
        self.t += 1;
        let step = c / self.t as f64;
        for (table, row, g) in grads.iter() {
            for (p, gi) in params.row_mut(table, row).iter_mut().zip(g) {
                *p -= step * gi;
            }
        }
        Ok(())
    }

    /// Dense reference update: walks every row of every table. Rows not marked
    /// as touched receive no Adam update (lazy semantics); SGD applies the zero
    /// gradient to them.
    pub fn apply_dense<P: ParameterStore>(&mut self, params: &mut P, grads: &DenseGradients) -> Result<()> {
        for (&table, dense) in &grads.tables {
            if let Some(j) = dense.values.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(format!(
                    "{table}[{}][{}]",
                    j / dense.dim,
                    j % dense.dim
                )));
            }
        }
        self.t += 1;
        match self.spec {
            OptimizerSpec::SgdCt { c } => {
                let step = c / self.t as f64;
                for (&table, dense) in &grads.tables {
                    for (row, g) in dense.values.chunks(dense.dim).enumerate() {
                        for (p, gi) in params.row_mut(table, row as u32).iter_mut().zip(g) {
                            *p -= step * gi;
                        }
                    }
                }
            }
            OptimizerSpec::Adam { lr, beta1, beta2, eps } => {
                let (c1, c2) = self.bias_corrections(beta1, beta2);
                for (&table, dense) in &grads.tables {
                    for (row, g) in dense.values.chunks(dense.dim).enumerate() {
                        if !dense.touched[row] {
                            continue;
                        }
                        let m = self.moments.entry((table, row as u32)).or_insert_with(|| Moments {
                            first: vec![0.0; g.len()],
                            second: vec![0.0; g.len()],
                        });
                        adam_row(
                            params.row_mut(table, row as u32),
                            g,
                            m,
                            (lr, beta1, beta2, eps),
                            (c1, c2),
                        );
                    }
                }
            }
        }
        Ok(())
    }
}

fn adam_row(
    param: &mut [f64],
    grad: &[f64],
    m: &mut Moments,
    (lr, beta1, beta2, eps): (f64, f64, f64, f64),
    (c1, c2): (f64, f64),
) {
    for j in 0..grad.len() {
        let g = grad[j];
        m.first[j] = beta1 * m.first[j] + (1.0 - beta1) * g;
        m.second[j] = beta2 * m.second[j] + (1.0 - beta2) * g * g;
        let m_hat = m.first[j] / c1;
        let v_hat = m.second[j] / c2;
        param[j] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// One line of the optional per-step telemetry stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTelemetry {
    pub step: u64,
    pub mean_loss: f64,
    pub global_norm: f64,
    pub max_row_norm: f64,
    pub clipped: bool,
}

impl StepTelemetry {
    pub const TSV_HEADER: &'static str = "step\tmean_loss\tgrad_global_norm\tmax_row_norm\tclipped";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.step, self.mean_loss, self.global_norm, self.max_row_norm, self.clipped as u8
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two small dense tables.
    #[derive(Debug, Clone, PartialEq)]
    struct Params {
        dim: usize,
        q: Vec<f64>,
        d: Vec<f64>,
    }

    impl Params {
        fn new(rows: usize, dim: usize, fill: f64) -> Self {
            Self {
                dim,
                q: (0..rows * dim).map(|i| fill + i as f64 * 0.01).collect(),
                d: (0..rows * dim).map(|i| fill - i as f64 * 0.02).collect(),
            }
        }

        fn row(&self, table: TableId, row: u32) -> &[f64] {
            let s = row as usize * self.dim;
            match table {
                TableId::Query => &self.q[s..s + self.dim],
                TableId::Document => &self.d[s..s + self.dim],
            }
        }
    }

    impl ParameterStore for Params {
        fn shape(&self, _table: TableId) -> (usize, usize) {
            (self.q.len() / self.dim, self.dim)
        }

        fn row_mut(&mut self, table: TableId, row: u32) -> &mut [f64] {
            let s = row as usize * self.dim;
            match table {
                TableId::Query => &mut self.q[s..s + self.dim],
                TableId::Document => &mut self.d[s..s + self.dim],
            }
        }
    }

    fn packet(entries: &[(TableId, u32, &[f64])]) -> GradientPacket {
        let mut p = GradientPacket::new();
        for (t, r, v) in entries {
            p.accumulate(*t, *r, v);
        }
        p
    }

    #[test]
    fn packet_accumulates_and_reports_norms() {
        let mut p = packet(&[(TableId::Query, 1, &[3.0, 0.0])]);
        p.accumulate(TableId::Query, 1, &[0.0, 4.0]);
        p.accumulate_scaled(TableId::Document, 0, &[1.0, 1.0], 0.0);
        assert_eq!(p.get(TableId::Query, 1).unwrap(), &[3.0, 4.0]);
        assert_eq!(p.global_norm(), 5.0);
        assert_eq!(p.max_row_norm(), 5.0);
        assert_eq!(p.len(), 2);
    }

    #[test]
    fn non_finite_packet_is_rejected_without_side_effects() {
        let mut params = Params::new(3, 2, 0.5);
        let before = params.clone();
        let mut state = OptimizerState::new(OptimizerSpec::default()).unwrap();
        let p = packet(&[(TableId::Document, 2, &[0.0, f64::NAN])]);
        let err = state.apply(&mut params, &p).unwrap_err();
        assert!(err.to_string().contains("document[2][1]"), "{err}");
        assert_eq!(params, before);
        assert_eq!(state.step(), 0);
    }

    #[test]
    fn adam_zero_packet_advances_step_only() {
        let mut params = Params::new(3, 2, 0.5);
        let before = params.clone();
        let mut state = OptimizerState::new(OptimizerSpec::default()).unwrap();
        state.apply(&mut params, &GradientPacket::new()).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn adam_single_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.001, m_hat = v_hat = 1 -> step = lr / (1 + eps).
        let mut params = Params::new(1, 1, 0.0);
        let mut state = OptimizerState::new(OptimizerSpec::default()).unwrap();
        state
            .apply(&mut params, &packet(&[(TableId::Query, 0, &[1.0])]))
            .unwrap();
        let expected = -0.01 / (1.0 + 1e-8);
        assert!((params.q[0] - expected).abs() < 1e-15, "{}", params.q[0]);
    }

    #[test]
    fn adam_constant_gradient_steps_do_not_grow() {
        let mut params = Params::new(2, 3, 0.0);
        let mut state = OptimizerState::new(OptimizerSpec::default()).unwrap();
        let g = packet(&[(TableId::Query, 1, &[0.3, -2.0, 1e-3])]);
        let p0 = params.clone();
        state.apply(&mut params, &g).unwrap();
        let p1 = params.clone();
        state.apply(&mut params, &g).unwrap();
        for j in 0..3 {
            let first = (p1.row(TableId::Query, 1)[j] - p0.row(TableId::Query, 1)[j]).abs();
            let second = (params.row(TableId::Query, 1)[j] - p1.row(TableId::Query, 1)[j]).abs();
            assert!(second <= first * (1.0 + 1e-6), "{j}: {first} {second}");
        }
    }

    #[test]
    fn sgd_ct_schedule() {
        let mut params = Params::new(1, 2, 0.0);
        let start = params.q.clone();
        let mut state = OptimizerState::new(OptimizerSpec::sgd_ct(1.0)).unwrap();
        let ones = packet(&[(TableId::Query, 0, &[1.0, 1.0])]);
        state.apply(&mut params, &ones).unwrap();
        for (x, x0) in params.q.iter().zip(&start) {
            assert_eq!(x - x0, -1.0);
        }
        for _ in 0..3 {
            state.apply(&mut params, &ones).unwrap();
        }
        let harmonic = 1.0 + 0.5 + 1.0 / 3.0 + 0.25;
        for (x, x0) in params.q.iter().zip(&start) {
            assert!((x - x0 + harmonic).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_ct_with_zero_c_freezes_parameters() {
        let mut params = Params::new(2, 2, 0.3);
        let before = params.clone();
        let mut state = OptimizerState::new(OptimizerSpec::sgd_ct(0.0)).unwrap();
        for _ in 0..5 {
            state
                .apply(&mut params, &packet(&[(TableId::Document, 1, &[5.0, -5.0])]))
                .unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn clipping_examples() {
        let g = packet(&[(TableId::Query, 0, &[6.0, 8.0])]);
        let clipped = clip_gradients(&g, 5.0).unwrap();
        assert_eq!(clipped.get(TableId::Query, 0).unwrap(), &[3.0, 4.0]);
        assert!((clipped.global_norm() - 5.0).abs() < 1e-12);

        let small = packet(&[(TableId::Query, 0, &[0.0, 3.0])]);
        assert_eq!(clip_gradients(&small, 5.0).unwrap(), small);
        assert!(clip_gradients(&GradientPacket::new(), 5.0).unwrap().is_empty());
        assert!(clip_gradients(&small, 0.0).is_err());
    }

    #[test]
    fn telemetry_line() {
        let t = StepTelemetry {
            step: 3,
            mean_loss: 0.5,
            global_norm: 2.0,
            max_row_norm: 1.5,
            clipped: true,
        };
        assert_eq!(t.to_tsv(), "3\t0.5\t2\t1.5\t1");
        assert_eq!(StepTelemetry::TSV_HEADER.split('\t').count(), 5);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_packet() -> impl Strategy<Value = GradientPacket> {
            prop::collection::vec((any::<bool>(), 0u32..4, prop::collection::vec(-10.0f64..10.0, 3)), 0..8).prop_map(
                |rows| {
                    let mut p = GradientPacket::new();
                    for (q, r, v) in rows {
                        let t = if q { TableId::Query } else { TableId::Document };
                        p.accumulate(t, r, &v);
                    }
                    p
                },
            )
        }

        proptest! {
            #[test]
            fn clip_is_idempotent(g in arb_packet(), tau in 0.01f64..20.0) {
                let once = clip_gradients(&g, tau).unwrap();
                let twice = clip_gradients(&once, tau).unwrap();
                prop_assert_eq!(&once, &twice);
                prop_assert!(once.global_norm() <= tau * (1.0 + 1e-9));
            }

            #[test]
            fn sparse_matches_dense(
                packets in prop::collection::vec(arb_packet(), 1..5),
                adam in any::<bool>(),
            ) {
                let spec = if adam { OptimizerSpec::default() } else { OptimizerSpec::sgd_ct(0.7) };
                let mut sparse_params = Params::new(4, 3, 0.1);
                let mut dense_params = sparse_params.clone();
                let mut sparse = OptimizerState::new(spec).unwrap();
                let mut dense = OptimizerState::new(spec).unwrap();
                let shapes = [(TableId::Query, 4, 3), (TableId::Document, 4, 3)];
                for p in &packets {
                    sparse.apply(&mut sparse_params, p).unwrap();
                    dense.apply_dense(&mut dense_params, &p.densify(&shapes)).unwrap();
                }
                // Both paths run the same per-row arithmetic in the same order.
                prop_assert_eq!(sparse_params, dense_params);
            }
        }
    }
}
