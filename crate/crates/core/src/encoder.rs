//! Mean-pooling tanh encoders over per-language embedding tables.
//!
//! `encode(tokens)_j = tanh((1/l) Σ_i E[tokens_i, j])`: embedding lookup,
//! average over positions, then an elementwise tanh.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::optim::{GradientPacket, ParameterStore, TableId};

pub const DEFAULT_DIM: usize = 64;

/// Default initialization half-width for dimension `dim`.
pub fn default_init_scale(dim: usize) -> f64 {
    0.5 / dim as f64
}

/// Dense `vocab_size × dim` embedding matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub language_tag: String,
    vocab_size: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn from_rows(language_tag: &str, vocab_size: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || vocab_size == 0 {
            return Err(Error::InvalidArgument(
                "embedding table needs at least one row and one column".into(),
            ));
        }
        if data.len() != vocab_size * dim {
            return Err(Error::DimensionMismatch {
                expected: vocab_size * dim,
                actual: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("embedding entries must be finite".into()));
        }
        Ok(Self {
            language_tag: language_tag.to_string(),
            vocab_size,
            dim,
            data,
        })
    }

    pub fn zeros(language_tag: &str, vocab_size: usize, dim: usize) -> Result<Self> {
        Self::from_rows(language_tag, vocab_size, dim, vec![0.0; vocab_size * dim])
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, id: u32) -> &[f64] {
        let start = id as usize * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn row_mut(&mut self, id: u32) -> &mut [f64] {
        let start = id as usize * self.dim;
        &mut self.data[start..start + self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyTokens);
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                size: self.vocab_size,
            });
        }
        Ok(())
    }
}

/// Entries i.i.d. uniform in `[-scale, scale]`.
pub fn init_embeddings(
    language_tag: &str,
    vocab_size: usize,
    dim: usize,
    seed: u64,
    scale: f64,
) -> Result<EmbeddingTable> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "init scale must be positive and finite, got {scale}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..vocab_size * dim)
        .map(|_| rng.random_range(-scale..=scale))
        .collect();
    EmbeddingTable::from_rows(language_tag, vocab_size, dim, data)
}

/// Encoder output together with the pre-activation mean needed for backward.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedVector {
    pub values: Vec<f64>,
    pub pre_activation: Vec<f64>,
}

impl EncodedVector {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

pub fn encode(table: &EmbeddingTable, tokens: &[u32]) -> Result<EncodedVector> {
    table.check_tokens(tokens)?;
    // Σ_t (count_t / l) · row_t over distinct ids in id order: independent of
    // token order, and repeating every token leaves the result unchanged.
    let mut sorted = tokens.to_vec();
    sorted.sort_unstable();
    let len = tokens.len() as f64;
    let mut mean = vec![0.0; table.dim];
    for run in sorted.chunk_by(|a, b| a == b) {
        let weight = run.len() as f64 / len;
        for (m, e) in mean.iter_mut().zip(table.row(run[0])) {
            *m += weight * e;
        }
    }
    let values = mean.iter().map(|m| m.tanh()).collect();
    Ok(EncodedVector {
        values,
        pre_activation: mean,
    })
}

/// Adds the gradient of `upstream · encode(tokens)` with respect to the rows
/// of `table` into `packet`, scaled by `scale`.
///
/// Row `tokens_i` receives `upstream_j · (1 − tanh²(m_j)) / l`; repeated
/// tokens accumulate.
pub fn accumulate_encode_backward(
    packet: &mut GradientPacket,
    table_id: TableId,
    tokens: &[u32],
    cached: &EncodedVector,
    upstream: &[f64],
    scale: f64,
) -> Result<()> {
    if upstream.len() != cached.values.len() {
        return Err(Error::DimensionMismatch {
            expected: cached.values.len(),
            actual: upstream.len(),
        });
    }
    if tokens.is_empty() {
        return Err(Error::EmptyTokens);
    }
    let inv_len = 1.0 / tokens.len() as f64;
    let local: Vec<f64> = upstream
        .iter()
        .zip(&cached.values)
        .map(|(u, y)| u * (1.0 - y * y) * inv_len)
        .collect();
    for &t in tokens {
        packet.accumulate_scaled(table_id, t, &local, scale);
    }
    Ok(())
}

/// Gradient packet for one encoded text; see [`accumulate_encode_backward`].
pub fn encode_backward(
    table: &EmbeddingTable,
    table_id: TableId,
    tokens: &[u32],
    cached: &EncodedVector,
    upstream: &[f64],
) -> Result<GradientPacket> {
    table.check_tokens(tokens)?;
    if cached.values.len() != table.dim {
        return Err(Error::DimensionMismatch {
            expected: table.dim,
            actual: cached.values.len(),
        });
    }
    let mut packet = GradientPacket::new();
    if upstream.iter().all(|&u| u == 0.0) && upstream.len() == table.dim {
        return Ok(packet);
    }
    accumulate_encode_backward(&mut packet, table_id, tokens, cached, upstream, 1.0)?;
    Ok(packet)
}

/// Query-language and document-language tables. No weights are shared.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub query: EmbeddingTable,
    pub document: EmbeddingTable,
}

impl DualEncoder {
    pub fn init(vocab_a: usize, vocab_b: usize, dim: usize, seed: u64, scale: f64) -> Result<Self> {
        // Separate streams so the two tables are independent draws.
        let query = init_embeddings("a", vocab_a, dim, seed.wrapping_mul(2).wrapping_add(1), scale)?;
        let document = init_embeddings("b", vocab_b, dim, seed.wrapping_mul(2).wrapping_add(2), scale)?;
        Ok(Self { query, document })
    }

    pub fn dim(&self) -> usize {
        self.query.dim()
    }

    pub fn table(&self, id: TableId) -> &EmbeddingTable {
        match id {
            TableId::Query => &self.query,
            TableId::Document => &self.document,
        }
    }

    pub fn table_mut(&mut self, id: TableId) -> &mut EmbeddingTable {
        match id {
            TableId::Query => &mut self.query,
            TableId::Document => &mut self.document,
        }
    }

    pub fn encode_query(&self, tokens: &[u32]) -> Result<EncodedVector> {
        encode(&self.query, tokens)
    }

    pub fn encode_document(&self, tokens: &[u32]) -> Result<EncodedVector> {
        encode(&self.document, tokens)
    }
}

impl ParameterStore for DualEncoder {
    fn shape(&self, table: TableId) -> (usize, usize) {
        let t = self.table(table);
        (t.vocab_size(), t.dim())
    }

    fn row_mut(&mut self, table: TableId, row: u32) -> &mut [f64] {
        self.table_mut(table).row_mut(row)
    }
}

const CHECKPOINT_MAGIC: &str = "smooth-clir-checkpoint v1";

/// Model plus the provenance line stored with it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DualEncoder,
    pub seed: u64,
    pub step: u64,
}

impl Checkpoint {
    /// Text format: a header, a `manifest seed=… step=…` line, then per table a
    /// `table <tag> <vocab_size> <dim>` line followed by one line per row.
    /// Floats use the shortest representation that parses back to the same
    /// bits, so the file round-trips losslessly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(out, "manifest seed={} step={}", self.seed, self.step);
        for (name, table) in [("query", &self.model.query), ("document", &self.model.document)] {
            let _ = writeln!(
                out,
                "table {name} {} {} {}",
                table.language_tag,
                table.vocab_size(),
                table.dim()
            );
            for row in table.as_slice().chunks(table.dim()) {
                let mut first = true;
                for x in row {
                    if !first {
                        out.push(' ');
                    }
                    first = false;
                    let _ = write!(out, "{x:?}");
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Malformed {
            file: file.to_string(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().peekable();
        match lines.next() {
            Some((_, CHECKPOINT_MAGIC)) => {}
            _ => return Err(bad(1, format!("missing `{CHECKPOINT_MAGIC}` header"))),
        }
        let (idx, manifest) = lines.next().ok_or_else(|| bad(2, "missing manifest line".into()))?;
        let mut seed = None;
        let mut step = None;
        for field in manifest.split_whitespace().skip(1) {
            match field.split_once('=') {
                Some(("seed", v)) => seed = v.parse().ok(),
                Some(("step", v)) => step = v.parse().ok(),
                _ => {}
            }
        }
        let (seed, step) = match (seed, step) {
            (Some(s), Some(t)) => (s, t),
            _ => return Err(bad(idx + 1, "manifest needs seed= and step=".into())),
        };

        let mut tables = Vec::new();
        for _ in 0..2 {
            let (idx, header) = lines.next().ok_or_else(|| bad(0, "missing table section".into()))?;
            let parts: Vec<&str> = header.split_whitespace().collect();
            if parts.len() != 5 || parts[0] != "table" {
                return Err(bad(idx + 1, format!("bad table header `{header}`")));
            }
            let vocab: usize = parts[3].parse().map_err(|_| bad(idx + 1, "bad vocab size".into()))?;
            let dim: usize = parts[4].parse().map_err(|_| bad(idx + 1, "bad dimension".into()))?;
            let mut data = Vec::with_capacity(vocab * dim);
            for _ in 0..vocab {
                let (idx, row) = lines
                    .next()
                    .ok_or_else(|| bad(0, format!("table {} truncated", parts[1])))?;
                let before = data.len();
                for tok in row.split_whitespace() {
                    data.push(
                        tok.parse::<f64>()
                            .map_err(|_| bad(idx + 1, format!("bad float `{tok}`")))?,
                    );
                }
                if data.len() - before != dim {
                    return Err(bad(idx + 1, format!("expected {dim} values")));
                }
            }
            tables.push((
                parts[1].to_string(),
                EmbeddingTable::from_rows(parts[2], vocab, dim, data)?,
            ));
        }
        let (document, query) = match (tables.pop(), tables.pop()) {
            (Some((dn, d)), Some((qn, q))) if qn == "query" && dn == "document" => (d, q),
            _ => return Err(bad(0, "expected query then document tables".into())),
        };
        if query.dim() != document.dim() {
            return Err(Error::CheckpointMismatch(format!(
                "query dim {} != document dim {}",
                query.dim(),
                document.dim()
            )));
        }
        Ok(Self {
            model: DualEncoder { query, document },
            seed,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}
