//! Training loop, evaluation and the experiment drivers built on top of them.
//!
//! One training example is one labeled `(query, document)` triple. A step
//! encodes both texts, scores them with the smooth cosine, evaluates the
//! ordinal loss and pushes `dℓ/dr · ∂r/∂v` back through the encoders into a
//! sparse gradient packet averaged over the batch.
//!
//! Everything here is single-threaded and a pure function of the config, the
//! corpus and the seed. Wall-clock time is kept out of [`RunManifest`] so that
//! repeated runs produce byte-identical manifests.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{parse_list, KeyValues};
use crate::corpus::{
    generate_synthetic, CorpusSplit, DocumentRecord, LabeledTriple, Partition, QueryRecord, SplitName, SyntheticConfig,
    MR, NR, SR,
};
use crate::encoder::{accumulate_encode_backward, default_init_scale, Checkpoint, DualEncoder, DEFAULT_DIM};
use crate::error::{Error, Result};
use crate::loss::{LossKind, LossValue, ThresholdVector, DEFAULT_PO_SCALE};
use crate::metrics::{aggregate, query_metrics, rank, Metric, MetricReport, QueryMetrics};
use crate::optim::{clip_in_place, GradientPacket, OptimizerSpec, OptimizerState, StepTelemetry, TableId};
use crate::similarity::{smooth_cosine, smooth_cosine_score, SimilarityConfig, DEFAULT_EPSILON};

const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4531;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FINAL_CHECKPOINT_FILE: &str = "checkpoint_final.txt";
pub const BEST_CHECKPOINT_FILE: &str = "checkpoint_best.txt";
pub const TELEMETRY_FILE: &str = "steps.tsv";
pub const TIMING_FILE: &str = "timing.json";

/// Default `c` for the sgd_ct generalization probe.
pub const GAP_STEP_CONSTANT: f64 = 30000.0;
/// Default step budget for the generalization probe.
pub const GAP_STEPS: u64 = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub epsilon: f64,
    pub thresholds: ThresholdVector,
    pub optimizer: OptimizerSpec,
    pub batch_size: usize,
    pub epochs: usize,
    pub shuffle: bool,
    pub seed: u64,
    pub dim: usize,
    /// Half-width of the uniform embedding initialization.
    pub init_scale: f64,
    /// Global-norm clipping threshold.
    pub clip: Option<f64>,
    /// Validation metrics every this many epochs (and after the last one);
    /// 0 turns them off.
    pub eval_every: usize,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<u64>,
    /// Permit `epsilon = 0`, the plain cosine.
    pub force_nonsmooth: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Sosl,
            epsilon: DEFAULT_EPSILON,
            thresholds: ThresholdVector::default(),
            optimizer: OptimizerSpec::default(),
            batch_size: 128,
            epochs: 30,
            shuffle: true,
            seed: 0,
            dim: DEFAULT_DIM,
            init_scale: default_init_scale(DEFAULT_DIM),
            clip: None,
            eval_every: 1,
            max_steps: None,
            force_nonsmooth: false,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "loss",
    "po_scale",
    "epsilon",
    "thresholds",
    "optimizer",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "c",
    "batch_size",
    "epochs",
    "shuffle",
    "seed",
    "dim",
    "init_scale",
    "clip",
    "eval_every",
    "max_steps",
    "force_nonsmooth",
];

impl TrainConfig {
    /// Reads the keys in [`TRAIN_KEYS`]; others are ignored here and should be
    /// checked by the caller.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(loss) = kv.parse_opt::<LossKind>("loss")? {
            cfg.loss = loss;
        }
        if let Some(scale) = kv.parse_opt::<f64>("po_scale")? {
            match &mut cfg.loss {
                LossKind::ProportionalOdds { scale: s } => *s = scale,
                _ => return Err(Error::Config("po_scale given but loss is not po".into())),
            }
        }
        if let Some(v) = kv.parse_opt("epsilon")? {
            cfg.epsilon = v;
        }
        if let Some(v) = kv.parse_opt("thresholds")? {
            cfg.thresholds = v;
        }

        let rule = kv.get("optimizer").unwrap_or("adam");
        cfg.optimizer = match rule {
            "adam" => {
                let OptimizerSpec::Adam {
                    mut lr,
                    mut beta1,
                    mut beta2,
                    mut eps,
                } = OptimizerSpec::default()
                else {
                    unreachable!("default optimizer is adam")
                };
                if let Some(v) = kv.parse_opt("lr")? {
                    lr = v;
                }
                if let Some(v) = kv.parse_opt("beta1")? {
                    beta1 = v;
                }
                if let Some(v) = kv.parse_opt("beta2")? {
                    beta2 = v;
                }
                if let Some(v) = kv.parse_opt("adam_eps")? {
                    eps = v;
                }
                OptimizerSpec::Adam { lr, beta1, beta2, eps }
            }
            "sgd_ct" => OptimizerSpec::sgd_ct(kv.parse_opt("c")?.unwrap_or(1.0)),
            other => return Err(Error::Config(format!("unknown optimizer `{other}`"))),
        };

        if let Some(v) = kv.parse_opt("batch_size")? {
            cfg.batch_size = v;
        }
        if let Some(v) = kv.parse_opt("epochs")? {
            cfg.epochs = v;
        }
        if let Some(v) = kv.parse_opt("shuffle")? {
            cfg.shuffle = v;
        }
        if let Some(v) = kv.parse_opt("seed")? {
            cfg.seed = v;
        }
        if let Some(v) = kv.parse_opt("dim")? {
            cfg.dim = v;
            cfg.init_scale = default_init_scale(cfg.dim.max(1));
        }
        if let Some(v) = kv.parse_opt("init_scale")? {
            cfg.init_scale = v;
        }
        cfg.clip = kv.parse_opt("clip")?;
        if let Some(v) = kv.parse_opt("eval_every")? {
            cfg.eval_every = v;
        }
        cfg.max_steps = kv.parse_opt("max_steps")?;
        if let Some(v) = kv.parse_opt("force_nonsmooth")? {
            cfg.force_nonsmooth = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.epsilon == 0.0 && !self.force_nonsmooth {
            return Err(Error::NonSmoothRefused);
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("dim must be >= 1".into()));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config("init_scale must be > 0".into()));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::Config("clip must be > 0".into()));
            }
        }
        if self.thresholds.classes() != 3 {
            return Err(Error::Config(format!(
                "labels have 3 classes; thresholds `{}` define {}",
                self.thresholds,
                self.thresholds.classes()
            )));
        }
        if let LossKind::ProportionalOdds { scale } = self.loss {
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(Error::Config("po_scale must be > 0".into()));
            }
        }
        self.optimizer.validate()
    }

    pub fn similarity(&self) -> Result<SimilarityConfig> {
        if self.epsilon > 0.0 {
            SimilarityConfig::new(self.epsilon)
        } else {
            SimilarityConfig::diagnostic(self.epsilon)
        }
    }

    /// Upper bound on the global norm of a batch gradient before clipping, or
    /// `None` for the plain cosine.
    ///
    /// Each pair contributes at most `|ℓ'| · 2/ε` per encoder (the encoder
    /// backward is a contraction), and the batch averages pairs.
    pub fn gradient_ceiling(&self) -> Option<f64> {
        (self.epsilon > 0.0).then(|| std::f64::consts::SQRT_2 * self.loss.slope_bound() * 2.0 / self.epsilon)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("loss", self.loss);
        if let LossKind::ProportionalOdds { scale } = self.loss {
            kv.set("po_scale", scale);
        }
        kv.set("epsilon", self.epsilon);
        kv.set("thresholds", &self.thresholds);
        match self.optimizer {
            OptimizerSpec::Adam { lr, beta1, beta2, eps } => {
                kv.set("optimizer", "adam");
                kv.set("lr", lr);
                kv.set("beta1", beta1);
                kv.set("beta2", beta2);
                kv.set("adam_eps", eps);
            }
            OptimizerSpec::SgdCt { c } => {
                kv.set("optimizer", "sgd_ct");
                kv.set("c", c);
            }
        }
        kv.set("batch_size", self.batch_size);
        kv.set("epochs", self.epochs);
        kv.set("shuffle", self.shuffle);
        kv.set("seed", self.seed);
        kv.set("dim", self.dim);
        kv.set("init_scale", self.init_scale);
        if let Some(c) = self.clip {
            kv.set("clip", c);
        }
        kv.set("eval_every", self.eval_every);
        if let Some(t) = self.max_steps {
            kv.set("max_steps", t);
        }
        kv.set("force_nonsmooth", self.force_nonsmooth);
        kv
    }
}

/// Forward results for one pair, after its gradient has been accumulated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairGrad {
    pub loss: LossValue,
    pub score: f64,
    /// Larger of the two smooth-cosine gradient norms.
    pub scs_grad_norm: f64,
}

/// Loss of one pair, forward only.
pub fn pair_loss(
    model: &DualEncoder,
    query: &[u32],
    doc: &[u32],
    label: u8,
    loss: LossKind,
    thresholds: &ThresholdVector,
    sim: &SimilarityConfig,
) -> Result<f64> {
    let q = model.encode_query(query)?;
    let d = model.encode_document(doc)?;
    let r = smooth_cosine_score(&q.values, &d.values, sim)?;
    Ok(loss.eval(r, label, thresholds)?.value)
}

/// Adds `scale · ∇ℓ` for one pair into `packet`.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_pair_gradient(
    model: &DualEncoder,
    query: &[u32],
    doc: &[u32],
    label: u8,
    loss: LossKind,
    thresholds: &ThresholdVector,
    sim: &SimilarityConfig,
    packet: &mut GradientPacket,
    scale: f64,
) -> Result<PairGrad> {
    let q = model.encode_query(query)?;
    let d = model.encode_document(doc)?;
    let s = smooth_cosine(&q.values, &d.values, sim)?;
    let lv = loss.eval(s.score, label, thresholds)?;
    if lv.derivative != 0.0 {
        let up_q: Vec<f64> = s.grad_q.iter().map(|g| lv.derivative * g).collect();
        let up_d: Vec<f64> = s.grad_d.iter().map(|g| lv.derivative * g).collect();
        accumulate_encode_backward(packet, TableId::Query, query, &q, &up_q, scale)?;
        accumulate_encode_backward(packet, TableId::Document, doc, &d, &up_d, scale)?;
    }
    Ok(PairGrad {
        loss: lv,
        score: s.score,
        scs_grad_norm: s.grad_norms.0.max(s.grad_norms.1),
    })
}

struct Example<'a> {
    query: &'a QueryRecord,
    doc: &'a DocumentRecord,
    triple: &'a LabeledTriple,
}

fn resolve<'a>(split: &'a CorpusSplit, part: &'a Partition) -> Result<Vec<Example<'a>>> {
    let queries: HashMap<&str, &QueryRecord> = part.queries.iter().map(|q| (q.id.as_str(), q)).collect();
    part.triples
        .iter()
        .map(|t| {
            let dangling = || Error::DanglingReference {
                query_id: t.query_id.clone(),
                doc_id: t.doc_id.clone(),
            };
            Ok(Example {
                query: queries.get(t.query_id.as_str()).copied().ok_or_else(dangling)?,
                doc: split.document(&t.doc_id).ok_or_else(dangling)?,
                triple: t,
            })
        })
        .collect()
}

/// One scored triple of a partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensitySample {
    pub query_id: String,
    pub doc_id: String,
    pub label: u8,
    pub score: f64,
}

fn check_model(model: &DualEncoder, split: &CorpusSplit) -> Result<()> {
    let (qa, qb) = (model.query.vocab_size(), model.document.vocab_size());
    if qa != split.vocab_a.size() || qb != split.vocab_b.size() {
        return Err(Error::CheckpointMismatch(format!(
            "model vocabularies {qa}/{qb}, corpus vocabularies {}/{}",
            split.vocab_a.size(),
            split.vocab_b.size()
        )));
    }
    Ok(())
}

/// Scores every triple of a partition, in triple order. Each text is encoded
/// once.
pub fn score_partition(
    model: &DualEncoder,
    split: &CorpusSplit,
    name: SplitName,
    sim: &SimilarityConfig,
) -> Result<Vec<DensitySample>> {
    check_model(model, split)?;
    let examples = resolve(split, split.partition(name))?;
    let mut q_cache: HashMap<&str, Vec<f64>> = HashMap::new();
    let mut d_cache: HashMap<&str, Vec<f64>> = HashMap::new();
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        if !q_cache.contains_key(ex.query.id.as_str()) {
            q_cache.insert(&ex.query.id, model.encode_query(&ex.query.tokens)?.values);
        }
        if !d_cache.contains_key(ex.doc.id.as_str()) {
            d_cache.insert(&ex.doc.id, model.encode_document(&ex.doc.tokens)?.values);
        }
        let score = smooth_cosine_score(&q_cache[ex.query.id.as_str()], &d_cache[ex.doc.id.as_str()], sim)?;
        out.push(DensitySample {
            query_id: ex.triple.query_id.clone(),
            doc_id: ex.triple.doc_id.clone(),
            label: ex.triple.label,
            score,
        });
    }
    Ok(out)
}

/// Mean loss over scored samples; `None` when there are none.
pub fn mean_loss(samples: &[DensitySample], loss: LossKind, thresholds: &ThresholdVector) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for s in samples {
        sum += loss.eval(s.score, s.label, thresholds)?.value;
    }
    Ok(Some(sum / samples.len() as f64))
}

/// Ranks each query's candidates, queries in order of first appearance.
pub fn per_query_from_samples(samples: &[DensitySample]) -> Vec<QueryMetrics> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<(String, f64, u8)>> = HashMap::new();
    for s in samples {
        let entry = groups.entry(s.query_id.as_str()).or_insert_with(|| {
            order.push(s.query_id.as_str());
            Vec::new()
        });
        entry.push((s.doc_id.clone(), s.score, s.label));
    }
    order
        .into_iter()
        .map(|q| query_metrics(&rank(q, groups.remove(q).unwrap_or_default())))
        .collect()
}

/// Ranks each query's candidates and averages the metrics.
pub fn metrics_from_samples(samples: &[DensitySample]) -> Result<MetricReport> {
    aggregate(&per_query_from_samples(samples))
}

/// Scores a partition and aggregates its metrics.
pub fn evaluate(
    model: &DualEncoder,
    split: &CorpusSplit,
    name: SplitName,
    sim: &SimilarityConfig,
) -> Result<MetricReport> {
    let samples = score_partition(model, split, name, sim)?;
    if samples.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    metrics_from_samples(&samples)
}

/// `(y, r)` pairs for density plots; empty for an empty partition.
pub fn export_score_density(
    model: &DualEncoder,
    split: &CorpusSplit,
    name: SplitName,
    sim: &SimilarityConfig,
) -> Result<Vec<DensitySample>> {
    score_partition(model, split, name, sim)
}

pub fn density_to_tsv(samples: &[DensitySample]) -> String {
    let mut out = String::from("query_id\tdoc_id\tlabel\tscore\n");
    for s in samples {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", s.query_id, s.doc_id, s.label, s.score);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub label: u8,
    pub count: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensitySummary {
    /// NR, SR, MR in that order; the mean of an empty class is NaN.
    pub per_class: Vec<ClassStats>,
    /// Fraction of samples whose score lies in `[θ_{y−1}, θ_y]`.
    pub in_segment: f64,
}

pub fn summarize_density(samples: &[DensitySample], thresholds: &ThresholdVector) -> Result<DensitySummary> {
    let per_class = [NR, SR, MR]
        .into_iter()
        .map(|label| {
            let (count, sum) = samples
                .iter()
                .filter(|s| s.label == label)
                .fold((0usize, 0.0), |(n, s), x| (n + 1, s + x.score));
            ClassStats {
                label,
                count,
                mean: if count > 0 { sum / count as f64 } else { f64::NAN },
            }
        })
        .collect();
    let mut inside = 0usize;
    for s in samples {
        let (lo, hi) = thresholds.segment(s.label)?;
        if (lo..=hi).contains(&s.score) {
            inside += 1;
        }
    }
    let in_segment = if samples.is_empty() {
        0.0
    } else {
        inside as f64 / samples.len() as f64
    };
    Ok(DensitySummary { per_class, in_segment })
}

/// Per-epoch record. Epoch 0 describes the initial model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    /// Mean training loss over all training triples at the end of the epoch.
    pub train_loss: f64,
    /// Mean of the batch losses seen during the epoch.
    pub running_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_metrics: Option<MetricReport>,
    pub max_scs_grad_norm: f64,
    pub max_batch_grad_norm: f64,
    pub clipped_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRecord {
    pub step: u64,
    pub loss: f64,
    pub metrics: MetricReport,
}

/// Everything a run reports, in the order it happened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub corpus_hash: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch with the best validation NDCG@5.
    pub best_epoch: Option<usize>,
    pub test: Option<TestRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ManifestLine {
    Config {
        config: TrainConfig,
        corpus_hash: String,
        seed: u64,
    },
    Epoch(EpochRecord),
    Best {
        epoch: usize,
    },
    Test(TestRecord),
}

impl RunManifest {
    pub fn to_jsonl(&self) -> String {
        let mut lines = vec![ManifestLine::Config {
            config: self.config.clone(),
            corpus_hash: self.corpus_hash.clone(),
            seed: self.seed,
        }];
        lines.extend(self.epochs.iter().cloned().map(ManifestLine::Epoch));
        if let Some(epoch) = self.best_epoch {
            lines.push(ManifestLine::Best { epoch });
        }
        if let Some(t) = &self.test {
            lines.push(ManifestLine::Test(t.clone()));
        }
        let mut out = String::new();
        for line in &lines {
            out.push_str(&serde_json::to_string(line).expect("manifest serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(text: &str, file: &str) -> Result<Self> {
        let mut manifest: Option<RunManifest> = None;
        for (idx, raw) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let malformed = |message: String| Error::Malformed {
                file: file.to_string(),
                line: idx + 1,
                message,
            };
            let line: ManifestLine = serde_json::from_str(raw).map_err(|e| malformed(e.to_string()))?;
            match (line, manifest.as_mut()) {
                (
                    ManifestLine::Config {
                        config,
                        corpus_hash,
                        seed,
                    },
                    None,
                ) => {
                    manifest = Some(RunManifest {
                        config,
                        corpus_hash,
                        seed,
                        epochs: Vec::new(),
                        best_epoch: None,
                        test: None,
                    })
                }
                (ManifestLine::Config { .. }, Some(_)) => return Err(malformed("second config line".into())),
                (_, None) => return Err(malformed("manifest must start with a config line".into())),
                (ManifestLine::Epoch(e), Some(m)) => m.epochs.push(e),
                (ManifestLine::Best { epoch }, Some(m)) => m.best_epoch = Some(epoch),
                (ManifestLine::Test(t), Some(m)) => m.test = Some(t),
            }
        }
        manifest.ok_or_else(|| Error::Malformed {
            file: file.to_string(),
            line: 0,
            message: "empty manifest".into(),
        })
    }

    pub fn last_epoch(&self) -> &EpochRecord {
        self.epochs.last().expect("epoch 0 is always recorded")
    }

    /// Largest smooth-cosine gradient norm seen during training.
    pub fn max_scs_grad_norm(&self) -> f64 {
        self.epochs.iter().map(|e| e.max_scs_grad_norm).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub manifest: RunManifest,
    pub final_checkpoint: Checkpoint,
    /// Best-validation checkpoint; the final one when no validation metrics exist.
    pub best_checkpoint: Checkpoint,
    pub telemetry: Vec<StepTelemetry>,
    pub elapsed: Duration,
}

impl TrainOutcome {
    /// Writes manifest, checkpoints, step telemetry and timing into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        write(MANIFEST_FILE, self.manifest.to_jsonl())?;
        self.final_checkpoint.save(&dir.join(FINAL_CHECKPOINT_FILE))?;
        self.best_checkpoint.save(&dir.join(BEST_CHECKPOINT_FILE))?;
        let mut tsv = String::from(StepTelemetry::TSV_HEADER);
        tsv.push('\n');
        for t in &self.telemetry {
            tsv.push_str(&t.to_tsv());
            tsv.push('\n');
        }
        write(TELEMETRY_FILE, tsv)?;
        write(
            TIMING_FILE,
            format!("{{\"wall_clock_seconds\":{}}}\n", self.elapsed.as_secs_f64()),
        )
    }
}

#[derive(Default)]
struct EpochStats {
    loss_sum: f64,
    batches: usize,
    max_scs: f64,
    max_batch: f64,
    clipped: u64,
}

fn snapshot(
    model: &DualEncoder,
    split: &CorpusSplit,
    cfg: &TrainConfig,
    sim: &SimilarityConfig,
    epoch: usize,
    step: u64,
    stats: Option<&EpochStats>,
    with_metrics: bool,
) -> Result<EpochRecord> {
    let train = score_partition(model, split, SplitName::Train, sim)?;
    let train_loss = mean_loss(&train, cfg.loss, &cfg.thresholds)?.unwrap_or(0.0);
    let val = score_partition(model, split, SplitName::Validation, sim)?;
    let val_loss = mean_loss(&val, cfg.loss, &cfg.thresholds)?;
    let val_metrics = if with_metrics && !val.is_empty() {
        Some(metrics_from_samples(&val)?)
    } else {
        None
    };
    let (running_loss, max_scs, max_batch, clipped) = match stats {
        Some(s) if s.batches > 0 => (Some(s.loss_sum / s.batches as f64), s.max_scs, s.max_batch, s.clipped),
        _ => (None, 0.0, 0.0, 0),
    };
    Ok(EpochRecord {
        epoch,
        step,
        train_loss,
        running_loss,
        val_loss,
        val_metrics,
        max_scs_grad_norm: max_scs,
        max_batch_grad_norm: max_batch,
        clipped_steps: clipped,
    })
}

/// Trains a fresh model on the training partition of `split`.
pub fn train(cfg: &TrainConfig, split: &CorpusSplit) -> Result<TrainOutcome> {
    let started = Instant::now();
    cfg.validate()?;
    let sim = cfg.similarity()?;
    let examples = resolve(split, &split.train)?;
    if examples.is_empty() {
        return Err(Error::InvalidArgument("training partition is empty".into()));
    }
    let mut model = DualEncoder::init(
        split.vocab_a.size(),
        split.vocab_b.size(),
        cfg.dim,
        cfg.seed,
        cfg.init_scale,
    )?;
    let mut opt = OptimizerState::new(cfg.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let ceiling = cfg.gradient_ceiling();
    let max_steps = cfg.max_steps.unwrap_or(u64::MAX);
    let metrics_due = |epoch: usize| cfg.eval_every > 0 && (epoch.is_multiple_of(cfg.eval_every) || epoch == cfg.epochs);

    let mut epochs = vec![snapshot(&model, split, cfg, &sim, 0, 0, None, metrics_due(0))?];
    let mut best: Option<(usize, f64, DualEncoder, u64)> = None;
    let mut consider_best = |record: &EpochRecord, model: &DualEncoder| {
        if let Some(m) = &record.val_metrics {
            if best.as_ref().is_none_or(|(_, ndcg, _, _)| m.ndcg_at_5 > *ndcg) {
                best = Some((record.epoch, m.ndcg_at_5, model.clone(), record.step));
            }
        }
    };
    consider_best(&epochs[0], &model);

    let mut telemetry = Vec::new();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        if step >= max_steps {
            break;
        }
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut stats = EpochStats::default();
        for batch in order.chunks(cfg.batch_size) {
            if step >= max_steps {
                break;
            }
            let mut packet = GradientPacket::new();
            packet.step_id = step + 1;
            let scale = 1.0 / batch.len() as f64;
            let mut loss_sum = 0.0;
            for &i in batch {
                let ex = &examples[i];
                let pg = accumulate_pair_gradient(
                    &model,
                    &ex.query.tokens,
                    &ex.doc.tokens,
                    ex.triple.label,
                    cfg.loss,
                    &cfg.thresholds,
                    &sim,
                    &mut packet,
                    scale,
                )?;
                if !pg.loss.value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step: step + 1,
                        detail: format!(
                            "query {} doc {} label {} score {} loss {}",
                            ex.triple.query_id, ex.triple.doc_id, ex.triple.label, pg.score, pg.loss.value
                        ),
                    });
                }
                loss_sum += pg.loss.value;
                stats.max_scs = stats.max_scs.max(pg.scs_grad_norm);
            }
            packet.check_finite()?;
            let norm = packet.global_norm();
            if let Some(c) = ceiling {
                if norm > c * (1.0 + 1e-9) {
                    return Err(Error::GradientBoundViolation {
                        step: step + 1,
                        norm,
                        ceiling: c,
                    });
                }
            }
            let clipped = match cfg.clip {
                Some(t) => clip_in_place(&mut packet, t)?,
                None => false,
            };
            let max_row_norm = packet.max_row_norm();
            opt.apply(&mut model, &packet)?;
            step += 1;
            let mean = loss_sum * scale;
            stats.loss_sum += mean;
            stats.batches += 1;
            stats.max_batch = stats.max_batch.max(norm);
            stats.clipped += clipped as u64;
            telemetry.push(StepTelemetry {
                step,
                mean_loss: mean,
                global_norm: norm,
                max_row_norm,
                clipped,
            });
        }
        let record = snapshot(&model, split, cfg, &sim, epoch, step, Some(&stats), metrics_due(epoch))?;
        consider_best(&record, &model);
        epochs.push(record);
    }

    let test_samples = score_partition(&model, split, SplitName::Test, &sim)?;
    let test = if test_samples.is_empty() {
        None
    } else {
        Some(TestRecord {
            step,
            loss: mean_loss(&test_samples, cfg.loss, &cfg.thresholds)?.unwrap_or(0.0),
            metrics: metrics_from_samples(&test_samples)?,
        })
    };

    let final_checkpoint = Checkpoint {
        model: model.clone(),
        seed: cfg.seed,
        step,
    };
    let (best_epoch, best_checkpoint) = match best {
        Some((epoch, _, m, s)) => (
            Some(epoch),
            Checkpoint {
                model: m,
                seed: cfg.seed,
                step: s,
            },
        ),
        None => (None, final_checkpoint.clone()),
    };
    Ok(TrainOutcome {
        manifest: RunManifest {
            config: cfg.clone(),
            corpus_hash: split.content_hash(),
            seed: cfg.seed,
            epochs,
            best_epoch,
            test,
        },
        final_checkpoint,
        best_checkpoint,
        telemetry,
        elapsed: started.elapsed(),
    })
}

fn metric_header() -> String {
    Metric::ALL.iter().map(|m| m.name()).collect::<Vec<_>>().join("\t")
}

fn metric_cells(r: &MetricReport) -> String {
    Metric::ALL
        .iter()
        .map(|&m| r.get(m).to_string())
        .collect::<Vec<_>>()
        .join("\t")
}

/// Copies of `base` differing only in the loss.
pub fn loss_variants(base: &TrainConfig, losses: &[LossKind]) -> Vec<TrainConfig> {
    losses
        .iter()
        .map(|&loss| TrainConfig { loss, ..base.clone() })
        .collect()
}

#[derive(Debug, Clone)]
pub struct LossComparisonRow {
    pub loss: LossKind,
    pub test: MetricReport,
    pub train_density: Vec<DensitySample>,
    pub train_summary: DensitySummary,
    pub manifest: RunManifest,
}

/// Trains one model per config on the same corpus. All configs must share a
/// seed.
pub fn experiment_loss_comparison(configs: &[TrainConfig], split: &CorpusSplit) -> Result<Vec<LossComparisonRow>> {
    let Some(first) = configs.first() else {
        return Err(Error::InvalidArgument("no losses to compare".into()));
    };
    if let Some(other) = configs.iter().find(|c| c.seed != first.seed) {
        return Err(Error::InvalidArgument(format!(
            "loss comparison needs one seed, got {} and {}",
            first.seed, other.seed
        )));
    }
    configs
        .iter()
        .map(|cfg| {
            let out = train(cfg, split)?;
            let sim = cfg.similarity()?;
            let model = &out.final_checkpoint.model;
            let test = evaluate(model, split, SplitName::Test, &sim)?;
            let train_density = export_score_density(model, split, SplitName::Train, &sim)?;
            let train_summary = summarize_density(&train_density, &cfg.thresholds)?;
            Ok(LossComparisonRow {
                loss: cfg.loss,
                test,
                train_density,
                train_summary,
                manifest: out.manifest,
            })
        })
        .collect()
}

pub fn loss_comparison_tsv(rows: &[LossComparisonRow]) -> String {
    let mut out = format!("loss\t{}\tin_segment\n", metric_header());
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}",
            r.loss,
            metric_cells(&r.test),
            r.train_summary.in_segment
        );
    }
    out
}

/// `θ_1 ∈ {0.0, 0.1, …, 0.5}`, `θ_2 ∈ {θ_1 + 0.1, …, 0.9}`.
pub fn default_theta_grid() -> Vec<(f64, f64)> {
    let mut grid = Vec::new();
    for i in 0..=5 {
        for j in (i + 1)..=9 {
            grid.push((i as f64 / 10.0, j as f64 / 10.0));
        }
    }
    grid
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonSweepRow {
    pub epsilon: f64,
    pub thresholds: Option<ThresholdVector>,
    pub val_ndcg_at_5: Option<f64>,
    pub test: Option<MetricReport>,
    pub max_scs_grad_norm: f64,
    pub notes: Vec<String>,
}

/// For each ε, trains over the θ grid, keeps the θ with the best validation
/// NDCG@5 and reports its test metrics. `ε = 0` runs as the plain cosine.
/// Grid points that are not valid threshold vectors are skipped with a note,
/// and so are runs that fail.
pub fn experiment_epsilon_sweep(
    base: &TrainConfig,
    epsilons: &[f64],
    theta_grid: &[(f64, f64)],
    split: &CorpusSplit,
) -> Result<Vec<EpsilonSweepRow>> {
    if split.validation.is_empty() {
        return Err(Error::InvalidArgument(
            "epsilon sweep needs a validation partition".into(),
        ));
    }
    let mut rows = Vec::with_capacity(epsilons.len());
    for &epsilon in epsilons {
        let mut row = EpsilonSweepRow {
            epsilon,
            thresholds: None,
            val_ndcg_at_5: None,
            test: None,
            max_scs_grad_norm: 0.0,
            notes: Vec::new(),
        };
        for &(t1, t2) in theta_grid {
            let thresholds = match ThresholdVector::new(vec![t1, t2]) {
                Ok(t) => t,
                Err(_) => {
                    row.notes.push(format!("skipped unordered θ=({t1},{t2})"));
                    continue;
                }
            };
            let cfg = TrainConfig {
                epsilon,
                thresholds: thresholds.clone(),
                force_nonsmooth: base.force_nonsmooth || epsilon == 0.0,
                ..base.clone()
            };
            let out = match train(&cfg, split) {
                Ok(out) => out,
                Err(e) => {
                    row.notes.push(format!("θ=({t1},{t2}) failed: {e}"));
                    continue;
                }
            };
            row.max_scs_grad_norm = row.max_scs_grad_norm.max(out.manifest.max_scs_grad_norm());
            let sim = cfg.similarity()?;
            let val = evaluate(&out.final_checkpoint.model, split, SplitName::Validation, &sim)?;
            if row.val_ndcg_at_5.is_none_or(|best| val.ndcg_at_5 > best) {
                row.val_ndcg_at_5 = Some(val.ndcg_at_5);
                row.thresholds = Some(thresholds);
                row.test = out.manifest.test.map(|t| t.metrics);
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn epsilon_sweep_tsv(rows: &[EpsilonSweepRow]) -> String {
    let mut out = format!(
        "epsilon\ttheta\tval_NDCG@5\t{}\tmax_scs_grad_norm\tnotes\n",
        metric_header()
    );
    for r in rows {
        let theta = r.thresholds.as_ref().map_or("-".to_string(), |t| t.to_string());
        let val = r.val_ndcg_at_5.map_or("-".to_string(), |v| v.to_string());
        let cells = r
            .test
            .as_ref()
            .map_or_else(|| vec!["-"; Metric::ALL.len()].join("\t"), metric_cells);
        let _ = writeln!(
            out,
            "{}\t{theta}\t{val}\t{cells}\t{}\t{}",
            r.epsilon,
            r.max_scs_grad_norm,
            r.notes.join("; ")
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSweepRow {
    pub nr_per_query: usize,
    pub test: MetricReport,
    /// No NR documents: only MR and SR are ranked.
    pub degenerate: bool,
}

/// Regenerates the synthetic corpus for each NR count, trains and evaluates.
pub fn experiment_negative_sweep(
    base: &TrainConfig,
    synthetic: &SyntheticConfig,
    nr_counts: &[usize],
) -> Result<Vec<NegativeSweepRow>> {
    nr_counts
        .iter()
        .map(|&nr| {
            let corpus_cfg = SyntheticConfig {
                nr_per_query: nr,
                ..synthetic.clone()
            };
            let split = generate_synthetic(&corpus_cfg, corpus_cfg.seed)?;
            let out = train(base, &split)?;
            let test = evaluate(
                &out.final_checkpoint.model,
                &split,
                SplitName::Test,
                &base.similarity()?,
            )?;
            Ok(NegativeSweepRow {
                nr_per_query: nr,
                test,
                degenerate: nr == 0,
            })
        })
        .collect()
}

pub fn negative_sweep_tsv(rows: &[NegativeSweepRow]) -> String {
    let mut out = format!("nr_per_query\t{}\tdegenerate\n", metric_header());
    for r in rows {
        let _ = writeln!(out, "{}\t{}\t{}", r.nr_per_query, metric_cells(&r.test), r.degenerate);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRun {
    pub n_queries: usize,
    pub seed: u64,
    pub steps: u64,
    pub train_loss: f64,
    pub heldout_loss: f64,
}

impl GapRun {
    pub fn gap(&self) -> f64 {
        self.heldout_loss - self.train_loss
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapSummary {
    pub n_queries: usize,
    pub median_abs_gap: f64,
    pub runs: Vec<GapRun>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// For each corpus size and seed: generate, run exactly `steps` SGD steps with
/// step size `c/t`, and compare the training loss with the test loss.
pub fn experiment_generalization_gap(
    base: &TrainConfig,
    synthetic: &SyntheticConfig,
    sample_sizes: &[usize],
    seeds: &[u64],
    steps: u64,
) -> Result<Vec<GapSummary>> {
    if !matches!(base.optimizer, OptimizerSpec::SgdCt { .. }) {
        return Err(Error::Config(
            "the generalization-gap probe uses optimizer=sgd_ct".into(),
        ));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one seed".into()));
    }
    let mut summaries = Vec::with_capacity(sample_sizes.len());
    for &n in sample_sizes {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let corpus_cfg = SyntheticConfig {
                n_queries: n,
                seed,
                ..synthetic.clone()
            };
            let split = generate_synthetic(&corpus_cfg, seed)?;
            let per_epoch = split.train.triples.len().div_ceil(base.batch_size).max(1) as u64;
            let cfg = TrainConfig {
                seed,
                epochs: steps.div_ceil(per_epoch) as usize,
                max_steps: Some(steps),
                eval_every: 0,
                ..base.clone()
            };
            let out = train(&cfg, &split)?;
            let heldout = out
                .manifest
                .test
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument(format!("corpus of {n} queries has an empty test split")))?;
            runs.push(GapRun {
                n_queries: n,
                seed,
                steps: out.final_checkpoint.step,
                train_loss: out.manifest.last_epoch().train_loss,
                heldout_loss: heldout.loss,
            });
        }
        let mut gaps: Vec<f64> = runs.iter().map(|r| r.gap().abs()).collect();
        summaries.push(GapSummary {
            n_queries: n,
            median_abs_gap: median(&mut gaps),
            runs,
        });
    }
    Ok(summaries)
}

pub fn generalization_gap_tsv(summaries: &[GapSummary]) -> String {
    let mut out = String::from("n_queries\tseed\tsteps\ttrain_loss\theldout_loss\tgap\n");
    for s in summaries {
        for r in &s.runs {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.n_queries,
                r.seed,
                r.steps,
                r.train_loss,
                r.heldout_loss,
                r.gap()
            );
        }
        let _ = writeln!(out, "{}\tmedian\t-\t-\t-\t{}", s.n_queries, s.median_abs_gap);
    }
    out
}

/// Parses a `;`-separated list of `θ_1,θ_2` pairs.
pub fn parse_theta_grid(raw: &str) -> Result<Vec<(f64, f64)>> {
    raw.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|pair| match parse_list::<f64>(pair)?.as_slice() {
            [a, b] => Ok((*a, *b)),
            _ => Err(Error::Config(format!("θ grid entry `{pair}` is not a pair"))),
        })
        .collect()
}

pub fn default_po() -> LossKind {
    LossKind::ProportionalOdds {
        scale: DEFAULT_PO_SCALE,
    }
}
