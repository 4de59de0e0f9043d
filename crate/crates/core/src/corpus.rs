//! Corpus format, vocabularies, negative sampling, splits and the planted
//! synthetic bilingual generator.
//!
//! On-disk layout of a corpus directory:
//!
//! | file          | content                                                   |
//! | ------------- | --------------------------------------------------------- |
//! | `vocab_a.txt` | query-language tokens, one per line, line number = id     |
//! | `vocab_b.txt` | document-language tokens, same layout                     |
//! | `queries.jsonl` | `{"id":"q0","tokens":[4,17,9]}` per line               |
//! | `docs.jsonl`  | `{"id":"d0","tokens":[...]}` per line                     |
//! | `triples.tsv` | `query_id<TAB>doc_id<TAB>label`                           |
//!
//! Line 0 of each vocabulary file is the shared OOV token `<unk>`.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{parse_range, KeyValues};
use crate::error::{Error, Result};

pub const OOV_TOKEN: &str = "<unk>";
pub const OOV_ID: u32 = 0;

/// Irrelevant document.
pub const NR: u8 = 1;
/// Partially relevant document.
pub const SR: u8 = 2;
/// Relevant document.
pub const MR: u8 = 3;
/// Number of ordinal relevance classes used by the corpus format.
pub const NUM_CLASSES: usize = 3;

pub const VOCAB_A_FILE: &str = "vocab_a.txt";
pub const VOCAB_B_FILE: &str = "vocab_b.txt";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const DOCS_FILE: &str = "docs.jsonl";
pub const TRIPLES_FILE: &str = "triples.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";

// Independent RNG streams derived from one user seed.
const SPLIT_STREAM: u64 = 0x5EED_0000_5917_0001;
const NEGATIVE_STREAM: u64 = 0x5EED_0000_4E36_0002;

/// Token vocabulary for one language. Ids are dense in `0..size`, id 0 is OOV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    language_tag: String,
    tokens: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from `tokens` (not including the OOV entry, which is
    /// always prepended).
    pub fn new<I, S>(language_tag: &str, tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            language_tag: language_tag.to_string(),
            tokens: vec![OOV_TOKEN.to_string()],
            token_to_id: HashMap::from([(OOV_TOKEN.to_string(), OOV_ID)]),
        };
        for token in tokens {
            let token = token.into();
            if token.is_empty() || token.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!(
                    "vocabulary token `{token}` is empty or contains whitespace"
                )));
            }
            if vocab.token_to_id.contains_key(&token) {
                return Err(Error::DuplicateId {
                    kind: "token",
                    id: token,
                });
            }
            vocab.token_to_id.insert(token.clone(), vocab.tokens.len() as u32);
            vocab.tokens.push(token);
        }
        Ok(vocab)
    }

    /// `size` entries total: OOV plus `{tag}{i}` for `i` in `1..size`.
    pub fn synthetic(language_tag: &str, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidArgument("vocabulary size must be >= 1".into()));
        }
        Self::new(language_tag, (1..size).map(|i| format!("{language_tag}{i}")))
    }

    pub fn language_tag(&self) -> &str {
        &self.language_tag
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn oov_id(&self) -> u32 {
        OOV_ID
    }

    /// Id of `token`, or the OOV id.
    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(OOV_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Whitespace tokenization followed by lookup.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn load(path: &Path, language_tag: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file = path.display().to_string();
        let mut lines = text.lines();
        match lines.next() {
            Some(OOV_TOKEN) => {}
            other => {
                return Err(Error::Malformed {
                    file,
                    line: 1,
                    message: format!("expected `{OOV_TOKEN}` on the first line, got {other:?}"),
                })
            }
        }
        let tokens: Vec<&str> = lines.collect();
        Self::new(language_tag, tokens).map_err(|e| Error::Malformed {
            file,
            line: 0,
            message: e.to_string(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.tokens.len() * 6);
        for token in &self.tokens {
            out.push_str(token);
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub id: String,
    pub tokens: Vec<u32>,
}

impl QueryRecord {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl DocumentRecord {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledTriple {
    pub query_id: String,
    pub doc_id: String,
    pub label: u8,
}

impl LabeledTriple {
    pub fn new(query_id: &str, doc_id: &str, label: u8) -> Self {
        Self {
            query_id: query_id.to_string(),
            doc_id: doc_id.to_string(),
            label,
        }
    }
}

/// A fully loaded corpus, before splitting.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab_a: Vocabulary,
    pub vocab_b: Vocabulary,
    pub queries: Vec<QueryRecord>,
    pub documents: Vec<DocumentRecord>,
    pub triples: Vec<LabeledTriple>,
    /// Non-fatal findings from loading, e.g. queries with more than one MR document.
    pub warnings: Vec<String>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file = path.display().to_string();
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(idx, line)| {
            serde_json::from_str(line).map_err(|e| Error::Malformed {
                file: file.clone(),
                line: idx + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Replaces ids outside the vocabulary with the OOV id.
fn clamp_tokens(tokens: &mut [u32], vocab: &Vocabulary) {
    let size = vocab.size() as u32;
    for t in tokens.iter_mut() {
        if *t >= size {
            *t = OOV_ID;
        }
    }
}

/// Loads queries, documents and triples from `dir` using the given vocabularies.
pub fn load_corpus(dir: &Path, vocab_a: &Vocabulary, vocab_b: &Vocabulary) -> Result<Corpus> {
    let queries_path = dir.join(QUERIES_FILE);
    let docs_path = dir.join(DOCS_FILE);
    let triples_path = dir.join(TRIPLES_FILE);

    let mut queries: Vec<QueryRecord> = read_jsonl(&queries_path)?;
    let mut documents: Vec<DocumentRecord> = read_jsonl(&docs_path)?;

    let mut query_ids = HashSet::new();
    for (idx, q) in queries.iter_mut().enumerate() {
        if q.tokens.is_empty() {
            return Err(Error::Malformed {
                file: queries_path.display().to_string(),
                line: idx + 1,
                message: format!("query `{}` has no tokens", q.id),
            });
        }
        if !query_ids.insert(q.id.clone()) {
            return Err(Error::DuplicateId {
                kind: "query",
                id: q.id.clone(),
            });
        }
        clamp_tokens(&mut q.tokens, vocab_a);
    }
    let mut doc_ids = HashSet::new();
    for (idx, d) in documents.iter_mut().enumerate() {
        if d.tokens.is_empty() {
            return Err(Error::Malformed {
                file: docs_path.display().to_string(),
                line: idx + 1,
                message: format!("document `{}` has no tokens", d.id),
            });
        }
        if !doc_ids.insert(d.id.clone()) {
            return Err(Error::DuplicateId {
                kind: "document",
                id: d.id.clone(),
            });
        }
        clamp_tokens(&mut d.tokens, vocab_b);
    }

    let text = std::fs::read_to_string(&triples_path).map_err(|e| Error::io(&triples_path, e))?;
    let file = triples_path.display().to_string();
    let mut triples = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::Malformed {
            file: file.clone(),
            line: idx + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(malformed(format!(
                "expected 3 tab-separated fields, got {}",
                fields.len()
            )));
        }
        let label: u8 = fields[2]
            .trim()
            .parse()
            .map_err(|_| malformed(format!("bad label `{}`", fields[2])))?;
        if label == 0 || label as usize > NUM_CLASSES {
            return Err(malformed(format!("label {label} outside 1..={NUM_CLASSES}")));
        }
        let (qid, did) = (fields[0], fields[1]);
        if !query_ids.contains(qid) || !doc_ids.contains(did) {
            return Err(Error::DanglingReference {
                query_id: qid.to_string(),
                doc_id: did.to_string(),
            });
        }
        triples.push(LabeledTriple::new(qid, did, label));
    }

    let warnings = multi_mr_warnings(&triples);
    Ok(Corpus {
        vocab_a: vocab_a.clone(),
        vocab_b: vocab_b.clone(),
        queries,
        documents,
        triples,
        warnings,
    })
}

fn multi_mr_warnings(triples: &[LabeledTriple]) -> Vec<String> {
    let mut mr_count: HashMap<&str, usize> = HashMap::new();
    let mut order = Vec::new();
    for t in triples.iter().filter(|t| t.label == MR) {
        let c = mr_count.entry(&t.query_id).or_insert(0);
        if *c == 0 {
            order.push(t.query_id.as_str());
        }
        *c += 1;
    }
    order
        .into_iter()
        .filter(|q| mr_count[q] > 1)
        .map(|q| format!("query `{q}` has {} MR documents", mr_count[q]))
        .collect()
}

/// Loads vocabularies and records from a corpus directory.
pub fn load_corpus_dir(dir: &Path) -> Result<Corpus> {
    let vocab_a = Vocabulary::load(&dir.join(VOCAB_A_FILE), "a")?;
    let vocab_b = Vocabulary::load(&dir.join(VOCAB_B_FILE), "b")?;
    load_corpus(dir, &vocab_a, &vocab_b)
}

fn jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

fn triples_tsv(triples: &[LabeledTriple]) -> String {
    let mut out = String::new();
    for t in triples {
        let _ = writeln!(out, "{}\t{}\t{}", t.query_id, t.doc_id, t.label);
    }
    out
}

/// Writes the five corpus files in canonical form.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    corpus.vocab_a.write(&dir.join(VOCAB_A_FILE))?;
    corpus.vocab_b.write(&dir.join(VOCAB_B_FILE))?;
    let files = [
        (QUERIES_FILE, jsonl(&corpus.queries)),
        (DOCS_FILE, jsonl(&corpus.documents)),
        (TRIPLES_FILE, triples_tsv(&corpus.triples)),
    ];
    for (name, content) in files {
        let path = dir.join(name);
        std::fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Samples `k` distinct documents outside `exclude`, labeled NR.
pub fn negative_sample(
    query: &QueryRecord,
    all_docs: &[DocumentRecord],
    k: usize,
    seed: u64,
    exclude: &HashSet<String>,
) -> Result<Vec<LabeledTriple>> {
    let candidates: Vec<&DocumentRecord> = all_docs.iter().filter(|d| !exclude.contains(&d.id)).collect();
    if k > candidates.len() {
        return Err(Error::InsufficientCandidates {
            requested: k,
            available: candidates.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, candidates.len(), k)
        .into_iter()
        .map(|i| LabeledTriple::new(&query.id, &candidates[i].id, NR))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatio {
    pub train: u32,
    pub validation: u32,
    pub test: u32,
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self {
            train: 3,
            validation: 1,
            test: 1,
        }
    }
}

impl SplitRatio {
    /// Partition sizes for `n` queries; train and validation are rounded, test
    /// takes the remainder.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let total = (self.train + self.validation + self.test) as f64;
        let train = ((n as f64) * self.train as f64 / total).round() as usize;
        let train = train.min(n);
        let val = ((n as f64) * self.validation as f64 / total).round() as usize;
        let val = val.min(n - train);
        (train, val, n - train - val)
    }
}

/// The queries of one partition together with all their triples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Partition {
    pub queries: Vec<QueryRecord>,
    pub triples: Vec<LabeledTriple>,
}

impl Partition {
    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "validation" | "val" => Ok(SplitName::Validation),
            "test" => Ok(SplitName::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

/// Train / validation / test partitions sharing one document store.
#[derive(Debug, Clone)]
pub struct CorpusSplit {
    pub vocab_a: Vocabulary,
    pub vocab_b: Vocabulary,
    pub documents: Vec<DocumentRecord>,
    pub train: Partition,
    pub validation: Partition,
    pub test: Partition,
    pub ratio: SplitRatio,
    pub seed: u64,
    doc_index: HashMap<String, usize>,
    query_order: Vec<String>,
}

impl CorpusSplit {
    pub fn document(&self, id: &str) -> Option<&DocumentRecord> {
        self.doc_index.get(id).map(|&i| &self.documents[i])
    }

    pub fn partition(&self, name: SplitName) -> &Partition {
        match name {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::Test => &self.test,
        }
    }

    pub fn n_queries(&self) -> usize {
        self.train.queries.len() + self.validation.queries.len() + self.test.queries.len()
    }

    /// Reassembles the unsplit corpus. Queries come back in their original
    /// order, triples grouped by query in that order.
    pub fn to_corpus(&self) -> Corpus {
        let mut queries: Vec<QueryRecord> = Vec::with_capacity(self.n_queries());
        let mut triples = Vec::new();
        for p in [&self.train, &self.validation, &self.test] {
            queries.extend(p.queries.iter().cloned());
            triples.extend(p.triples.iter().cloned());
        }
        let position: HashMap<&str, usize> = self
            .query_order
            .iter()
            .enumerate()
            .map(|(i, q)| (q.as_str(), i))
            .collect();
        // Stable sorts keep triple order within a query.
        queries.sort_by_key(|q| position[q.id.as_str()]);
        triples.sort_by_key(|t| position[t.query_id.as_str()]);
        let warnings = multi_mr_warnings(&triples);
        Corpus {
            vocab_a: self.vocab_a.clone(),
            vocab_b: self.vocab_b.clone(),
            queries,
            documents: self.documents.clone(),
            triples,
            warnings,
        }
    }

    /// SHA-256 over the canonical serialization of the corpus and its split.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.vocab_a.to_text());
        hasher.update(self.vocab_b.to_text());
        hasher.update(jsonl(&self.documents));
        for p in [&self.train, &self.validation, &self.test] {
            hasher.update(b"--partition--\n");
            hasher.update(jsonl(&p.queries));
            hasher.update(triples_tsv(&p.triples));
        }
        hasher.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Deterministically assigns queries to partitions.
pub fn split_corpus(corpus: Corpus, ratio: SplitRatio, seed: u64) -> Result<CorpusSplit> {
    if ratio.train + ratio.validation + ratio.test == 0 {
        return Err(Error::InvalidArgument("split ratio sums to zero".into()));
    }
    let n = corpus.queries.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_STREAM);
    order.shuffle(&mut rng);
    let (n_train, n_val, _) = ratio.counts(n);
    let mut assignment = vec![SplitName::Test; n];
    for (rank, &qi) in order.iter().enumerate() {
        assignment[qi] = if rank < n_train {
            SplitName::Train
        } else if rank < n_train + n_val {
            SplitName::Validation
        } else {
            SplitName::Test
        };
    }
    let query_order: Vec<String> = corpus.queries.iter().map(|q| q.id.clone()).collect();
    let query_slot: HashMap<&str, SplitName> = corpus
        .queries
        .iter()
        .zip(&assignment)
        .map(|(q, &s)| (q.id.as_str(), s))
        .collect();

    let mut train = Partition::default();
    let mut validation = Partition::default();
    let mut test = Partition::default();
    for t in &corpus.triples {
        let slot = query_slot
            .get(t.query_id.as_str())
            .copied()
            .ok_or_else(|| Error::DanglingReference {
                query_id: t.query_id.clone(),
                doc_id: t.doc_id.clone(),
            })?;
        match slot {
            SplitName::Train => train.triples.push(t.clone()),
            SplitName::Validation => validation.triples.push(t.clone()),
            SplitName::Test => test.triples.push(t.clone()),
        }
    }
    for (q, s) in corpus.queries.into_iter().zip(assignment) {
        match s {
            SplitName::Train => train.queries.push(q),
            SplitName::Validation => validation.queries.push(q),
            SplitName::Test => test.queries.push(q),
        }
    }
    let doc_index = corpus
        .documents
        .iter()
        .enumerate()
        .map(|(i, d)| (d.id.clone(), i))
        .collect();
    Ok(CorpusSplit {
        vocab_a: corpus.vocab_a,
        vocab_b: corpus.vocab_b,
        documents: corpus.documents,
        train,
        validation,
        test,
        ratio,
        seed,
        doc_index,
        query_order,
    })
}

/// Shape of a planted synthetic bilingual corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub vocab_size_a: usize,
    pub vocab_size_b: usize,
    pub n_queries: usize,
    pub nr_per_query: usize,
    /// Mean of the Poisson-distributed SR count per query.
    pub sr_mean: f64,
    /// Inclusive query length range.
    pub query_len_range: (usize, usize),
    /// Inclusive document length range; MR documents are stretched to hold
    /// every mapped query token.
    pub doc_len_range: (usize, usize),
    /// Fraction of the mapped query tokens an SR document carries.
    pub sr_overlap_frac: f64,
    /// Query tokens are drawn with weight `rank^(-s)` by token id; 0 is uniform.
    #[serde(default)]
    pub query_zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            vocab_size_a: 1000,
            vocab_size_b: 1000,
            n_queries: 500,
            nr_per_query: 20,
            sr_mean: 3.0,
            query_len_range: (6, 10),
            doc_len_range: (8, 12),
            sr_overlap_frac: 0.4,
            query_zipf_exponent: 1.5,
            seed: 0,
        }
    }
}

pub const SYNTHETIC_KEYS: &[&str] = &[
    "vocab_size_a",
    "vocab_size_b",
    "n_queries",
    "nr_per_query",
    "sr_mean",
    "query_len_range",
    "doc_len_range",
    "sr_overlap_frac",
    "query_zipf_exponent",
    "seed",
];

impl SyntheticConfig {
    /// Missing keys keep their defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.ensure_known(SYNTHETIC_KEYS)?;
        let mut cfg = Self::default();
        if let Some(v) = kv.parse_opt("vocab_size_a")? {
            cfg.vocab_size_a = v;
        }
        if let Some(v) = kv.parse_opt("vocab_size_b")? {
            cfg.vocab_size_b = v;
        }
        if let Some(v) = kv.parse_opt("n_queries")? {
            cfg.n_queries = v;
        }
        if let Some(v) = kv.parse_opt("nr_per_query")? {
            cfg.nr_per_query = v;
        }
        if let Some(v) = kv.parse_opt("sr_mean")? {
            cfg.sr_mean = v;
        }
        if let Some(raw) = kv.get("query_len_range") {
            cfg.query_len_range = parse_range(raw)?;
        }
        if let Some(raw) = kv.get("doc_len_range") {
            cfg.doc_len_range = parse_range(raw)?;
        }
        if let Some(v) = kv.parse_opt("sr_overlap_frac")? {
            cfg.sr_overlap_frac = v;
        }
        if let Some(v) = kv.parse_opt("query_zipf_exponent")? {
            cfg.query_zipf_exponent = v;
        }
        if let Some(v) = kv.parse_opt("seed")? {
            cfg.seed = v;
        }
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("vocab_size_a", self.vocab_size_a);
        kv.set("vocab_size_b", self.vocab_size_b);
        kv.set("n_queries", self.n_queries);
        kv.set("nr_per_query", self.nr_per_query);
        kv.set("sr_mean", self.sr_mean);
        let (lo, hi) = self.query_len_range;
        kv.set("query_len_range", format!("{lo}..{hi}"));
        let (lo, hi) = self.doc_len_range;
        kv.set("doc_len_range", format!("{lo}..{hi}"));
        kv.set("sr_overlap_frac", self.sr_overlap_frac);
        kv.set("query_zipf_exponent", self.query_zipf_exponent);
        kv.set("seed", self.seed);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        let (qlo, qhi) = self.query_len_range;
        let (dlo, dhi) = self.doc_len_range;
        if qlo == 0 || dlo == 0 || qlo > qhi || dlo > dhi {
            return Err(Error::Config(
                "length ranges must be non-empty and start at >= 1".into(),
            ));
        }
        // Query tokens are distinct within a query, and the planted map A -> B
        // is injective on the non-OOV ids.
        if self.vocab_size_a < qhi + 1 {
            return Err(Error::Config(format!(
                "vocab_size_a = {} too small for {qhi} distinct query tokens",
                self.vocab_size_a
            )));
        }
        if self.vocab_size_b < self.vocab_size_a {
            return Err(Error::Config(format!(
                "vocab_size_b = {} smaller than vocab_size_a = {}; the planted map needs distinct targets",
                self.vocab_size_b, self.vocab_size_a
            )));
        }
        if !(self.sr_mean >= 0.0 && self.sr_mean.is_finite()) {
            return Err(Error::Config("sr_mean must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.sr_overlap_frac) {
            return Err(Error::Config("sr_overlap_frac must lie in [0, 1]".into()));
        }
        if !(self.query_zipf_exponent >= 0.0 && self.query_zipf_exponent.is_finite()) {
            return Err(Error::Config("query_zipf_exponent must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Generates a planted bilingual corpus and splits it 3:1:1.
///
/// A random injective map sends every query-language token to a
/// document-language token. For each query:
///
/// - one MR document holds all mapped query tokens plus uniform noise tokens,
/// - a Poisson(`sr_mean`) number of SR documents hold a random
///   `sr_overlap_frac` share of the mapped tokens plus noise,
/// - `nr_per_query` NR documents are drawn independently of the query.
///
/// Output is a pure function of `(config, seed)`.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<CorpusSplit> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab_a = Vocabulary::synthetic("a", config.vocab_size_a)?;
    let vocab_b = Vocabulary::synthetic("b", config.vocab_size_b)?;

    let n_a = config.vocab_size_a - 1;
    let n_b = config.vocab_size_b - 1;
    // planted[a - 1] is the document-language image of query token a.
    let planted: Vec<u32> = index::sample(&mut rng, n_b, n_a)
        .into_iter()
        .map(|i| i as u32 + 1)
        .collect();
    let sr_dist = if config.sr_mean > 0.0 {
        Some(Poisson::new(config.sr_mean).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };

    let (qlo, qhi) = config.query_len_range;
    let (dlo, dhi) = config.doc_len_range;
    let mut queries = Vec::with_capacity(config.n_queries);
    let mut documents = Vec::new();
    let mut triples = Vec::new();

    let noise =
        |rng: &mut ChaCha8Rng, n: usize| -> Vec<u32> { (0..n).map(|_| rng.random_range(1..=n_b as u32)).collect() };

    for qi in 0..config.n_queries {
        let qid = format!("q{qi}");
        let qlen = rng.random_range(qlo..=qhi);
        let picked = if config.query_zipf_exponent > 0.0 {
            let s = config.query_zipf_exponent;
            index::sample_weighted(&mut rng, n_a, |i| ((i + 1) as f64).powf(-s), qlen)
                .map_err(|e| Error::Config(e.to_string()))?
        } else {
            index::sample(&mut rng, n_a, qlen)
        };
        let tokens: Vec<u32> = picked.into_iter().map(|i| i as u32 + 1).collect();
        let mapped: Vec<u32> = tokens.iter().map(|&t| planted[t as usize - 1]).collect();

        let mut push_doc = |rng: &mut ChaCha8Rng, mut body: Vec<u32>, label: u8| {
            body.shuffle(rng);
            let did = format!("d{}", documents.len());
            triples.push(LabeledTriple::new(&qid, &did, label));
            documents.push(DocumentRecord { id: did, tokens: body });
        };

        let dlen = rng.random_range(dlo..=dhi).max(qlen);
        let mut body = mapped.clone();
        body.extend(noise(&mut rng, dlen - qlen));
        push_doc(&mut rng, body, MR);

        let n_sr = match &sr_dist {
            Some(d) => d.sample(&mut rng) as usize,
            None => 0,
        };
        let shared = ((config.sr_overlap_frac * qlen as f64).round() as usize).min(qlen);
        for _ in 0..n_sr {
            let dlen = rng.random_range(dlo..=dhi).max(shared);
            let mut body: Vec<u32> = index::sample(&mut rng, qlen, shared)
                .into_iter()
                .map(|i| mapped[i])
                .collect();
            body.extend(noise(&mut rng, dlen - shared));
            push_doc(&mut rng, body, SR);
        }

        for _ in 0..config.nr_per_query {
            let dlen = rng.random_range(dlo..=dhi);
            let body = noise(&mut rng, dlen);
            push_doc(&mut rng, body, NR);
        }

        queries.push(QueryRecord { id: qid, tokens });
    }

    let corpus = Corpus {
        vocab_a,
        vocab_b,
        queries,
        documents,
        triples,
        warnings: Vec::new(),
    };
    split_corpus(corpus, SplitRatio::default(), seed)
}

/// Sidecar written next to a corpus: how it was produced and split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub ratio: SplitRatio,
    pub synthetic: Option<SyntheticConfig>,
    pub content_hash: String,
}

/// Writes the corpus files plus `manifest.json`.
pub fn write_split(dir: &Path, split: &CorpusSplit, synthetic: Option<&SyntheticConfig>) -> Result<()> {
    write_corpus(dir, &split.to_corpus())?;
    let manifest = CorpusManifest {
        seed: split.seed,
        ratio: split.ratio,
        synthetic: synthetic.cloned(),
        content_hash: split.content_hash(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Loads a corpus directory and re-splits it with the seed and ratio from its
/// manifest (default ratio and seed 0 when no manifest is present).
pub fn load_split(dir: &Path) -> Result<CorpusSplit> {
    let corpus = load_corpus_dir(dir)?;
    let path = dir.join(MANIFEST_FILE);
    let (seed, ratio) = if path.exists() {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: CorpusManifest = serde_json::from_str(&text).map_err(|e| Error::Malformed {
            file: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        (m.seed, m.ratio)
    } else {
        (0, SplitRatio::default())
    };
    split_corpus(corpus, ratio, seed)
}

/// Draws fresh NR triples for every query of `corpus`, excluding the documents
/// already attached to that query. One seed per query is derived from `seed`.
pub fn resample_negatives(corpus: &mut Corpus, k: usize, seed: u64) -> Result<()> {
    let mut attached: HashMap<&str, HashSet<String>> = HashMap::new();
    for t in &corpus.triples {
        attached
            .entry(t.query_id.as_str())
            .or_default()
            .insert(t.doc_id.clone());
    }
    let mut fresh = Vec::new();
    for (qi, q) in corpus.queries.iter().enumerate() {
        let empty = HashSet::new();
        let exclude = attached.get(q.id.as_str()).unwrap_or(&empty);
        let qseed = seed ^ NEGATIVE_STREAM ^ (qi as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        fresh.extend(negative_sample(q, &corpus.documents, k, qseed, exclude)?);
    }
    corpus.triples.extend(fresh);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SyntheticConfig {
        SyntheticConfig {
            vocab_size_a: 50,
            vocab_size_b: 60,
            n_queries: 10,
            nr_per_query: 40,
            sr_mean: 2.0,
            ..SyntheticConfig::default()
        }
    }

    fn fixture() -> Corpus {
        let vocab_a = Vocabulary::new("a", ["hello", "world", "cat"]).unwrap();
        let vocab_b = Vocabulary::new("b", ["bonjour", "monde", "chat", "chien"]).unwrap();
        let q = |id: &str, t: &[u32]| QueryRecord {
            id: id.into(),
            tokens: t.to_vec(),
        };
        let d = |id: &str, t: &[u32]| DocumentRecord {
            id: id.into(),
            tokens: t.to_vec(),
        };
        Corpus {
            vocab_a,
            vocab_b,
            queries: vec![q("q0", &[1, 2]), q("q1", &[3])],
            documents: vec![d("d0", &[1, 2]), d("d1", &[3, 3, 4]), d("d2", &[4])],
            triples: vec![
                LabeledTriple::new("q0", "d0", MR),
                LabeledTriple::new("q0", "d1", SR),
                LabeledTriple::new("q0", "d2", NR),
                LabeledTriple::new("q1", "d0", NR),
                LabeledTriple::new("q1", "d1", MR),
                LabeledTriple::new("q1", "d2", NR),
            ],
            warnings: vec![],
        }
    }

    #[test]
    fn vocabulary_ids_are_dense_and_injective() {
        let v = Vocabulary::new("a", ["x", "y"]).unwrap();
        assert_eq!(v.size(), 3);
        assert_eq!(v.id("<unk>"), 0);
        assert_eq!(v.id("x"), 1);
        assert_eq!(v.id("y"), 2);
        assert_eq!(v.id("zzz"), v.oov_id());
        assert_eq!(v.tokenize("y  x unknown"), vec![2, 1, 0]);
        assert!(Vocabulary::new("a", ["x", "x"]).is_err());
    }

    #[test]
    fn fixture_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = fixture();
        write_corpus(dir.path(), &corpus).unwrap();
        let loaded = load_corpus_dir(dir.path()).unwrap();
        assert_eq!(loaded.triples.len(), 6);
        assert_eq!(loaded, corpus);

        let before: Vec<Vec<u8>> = [QUERIES_FILE, DOCS_FILE, TRIPLES_FILE, VOCAB_A_FILE]
            .iter()
            .map(|f| std::fs::read(dir.path().join(f)).unwrap())
            .collect();
        let out = tempfile::tempdir().unwrap();
        write_corpus(out.path(), &loaded).unwrap();
        for (i, f) in [QUERIES_FILE, DOCS_FILE, TRIPLES_FILE, VOCAB_A_FILE].iter().enumerate() {
            assert_eq!(std::fs::read(out.path().join(f)).unwrap(), before[i], "{f}");
        }
    }

    #[test]
    fn empty_triple_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let mut corpus = fixture();
        corpus.triples.clear();
        write_corpus(dir.path(), &corpus).unwrap();
        let loaded = load_corpus_dir(dir.path()).unwrap();
        assert!(loaded.triples.is_empty());
        assert_eq!(loaded.vocab_a.size(), 4);
        assert_eq!(loaded.vocab_b.size(), 5);
    }

    #[test]
    fn dangling_reference_names_the_missing_doc() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &fixture()).unwrap();
        std::fs::write(dir.path().join(TRIPLES_FILE), "q0\tdX\t1\n").unwrap();
        let err = load_corpus_dir(dir.path()).unwrap_err();
        assert!(matches!(err, Error::DanglingReference { ref doc_id, .. } if doc_id == "dX"));
        assert!(err.to_string().contains("dX"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &fixture()).unwrap();
        std::fs::write(dir.path().join(TRIPLES_FILE), "q0\td0\t3\nq0 d1 2\n").unwrap();
        match load_corpus_dir(dir.path()).unwrap_err() {
            Error::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut corpus = fixture();
        corpus.documents.push(corpus.documents[0].clone());
        write_corpus(dir.path(), &corpus).unwrap();
        assert!(matches!(
            load_corpus_dir(dir.path()).unwrap_err(),
            Error::DuplicateId { kind: "document", .. }
        ));
    }

    #[test]
    fn out_of_range_tokens_become_oov() {
        let dir = tempfile::tempdir().unwrap();
        let mut corpus = fixture();
        corpus.queries[0].tokens = vec![1, 99];
        write_corpus(dir.path(), &corpus).unwrap();
        let loaded = load_corpus_dir(dir.path()).unwrap();
        assert_eq!(loaded.queries[0].tokens, vec![1, OOV_ID]);
    }

    #[test]
    fn multiple_mr_documents_are_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let mut corpus = fixture();
        corpus.triples[1].label = MR;
        write_corpus(dir.path(), &corpus).unwrap();
        let loaded = load_corpus_dir(dir.path()).unwrap();
        assert_eq!(loaded.warnings.len(), 1);
        assert!(loaded.warnings[0].contains("q0"));
    }

    #[test]
    fn generator_label_histogram() {
        let split = generate_synthetic(&small_config(), 7).unwrap();
        let corpus = split.to_corpus();
        assert_eq!(corpus.queries.len(), 10);
        for q in &corpus.queries {
            let mine: Vec<_> = corpus.triples.iter().filter(|t| t.query_id == q.id).collect();
            let mr = mine.iter().filter(|t| t.label == MR).count();
            let nr = mine.iter().filter(|t| t.label == NR).count();
            let sr = mine.iter().filter(|t| t.label == SR).count();
            assert_eq!(mr, 1);
            assert_eq!(nr, 40);
            assert_eq!(mine.len(), 41 + sr);
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = small_config();
        write_split(a.path(), &generate_synthetic(&cfg, 3).unwrap(), Some(&cfg)).unwrap();
        write_split(b.path(), &generate_synthetic(&cfg, 3).unwrap(), Some(&cfg)).unwrap();
        for f in [QUERIES_FILE, DOCS_FILE, TRIPLES_FILE, VOCAB_B_FILE, MANIFEST_FILE] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
        let other = generate_synthetic(&cfg, 4).unwrap();
        assert_ne!(
            other.content_hash(),
            generate_synthetic(&cfg, 3).unwrap().content_hash()
        );
    }

    #[test]
    fn zero_sr_mean_produces_no_sr() {
        let cfg = SyntheticConfig {
            sr_mean: 0.0,
            ..small_config()
        };
        let corpus = generate_synthetic(&cfg, 1).unwrap().to_corpus();
        assert!(corpus.triples.iter().all(|t| t.label != SR));
    }

    #[test]
    fn mr_document_contains_mapped_query_tokens() {
        let cfg = small_config();
        let split = generate_synthetic(&cfg, 11).unwrap();
        let corpus = split.to_corpus();
        for q in &corpus.queries {
            let mr = corpus
                .triples
                .iter()
                .find(|t| t.query_id == q.id && t.label == MR)
                .unwrap();
            let doc = split.document(&mr.doc_id).unwrap();
            assert!(doc.len() >= q.len());
        }
    }

    #[test]
    fn generator_rejects_tiny_vocab() {
        let cfg = SyntheticConfig {
            vocab_size_a: 4,
            ..small_config()
        };
        assert!(matches!(generate_synthetic(&cfg, 0), Err(Error::Config(_))));
        let cfg = SyntheticConfig {
            vocab_size_b: 10,
            ..small_config()
        };
        assert!(generate_synthetic(&cfg, 0).is_err());
    }

    #[test]
    fn split_is_disjoint_and_covering() {
        let split = generate_synthetic(&small_config(), 5).unwrap();
        assert_eq!(split.train.queries.len(), 6);
        assert_eq!(split.validation.queries.len(), 2);
        assert_eq!(split.test.queries.len(), 2);
        let mut seen = HashSet::new();
        for p in [&split.train, &split.validation, &split.test] {
            for q in &p.queries {
                assert!(seen.insert(q.id.clone()));
            }
            for t in &p.triples {
                assert!(p.queries.iter().any(|q| q.id == t.query_id));
            }
        }
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn written_split_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let split = generate_synthetic(&cfg, 9).unwrap();
        write_split(dir.path(), &split, Some(&cfg)).unwrap();
        let reloaded = load_split(dir.path()).unwrap();
        assert_eq!(reloaded.content_hash(), split.content_hash());
        assert_eq!(reloaded.train, split.train);
    }

    #[test]
    fn synthetic_config_kv_round_trip() {
        let cfg = SyntheticConfig {
            sr_mean: 0.6,
            seed: 42,
            ..SyntheticConfig::default()
        };
        assert_eq!(SyntheticConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        let bad = KeyValues::parse("vocab_sise_a=10\n", "t").unwrap();
        assert!(SyntheticConfig::from_kv(&bad).is_err());
    }

    fn docs(n: usize) -> Vec<DocumentRecord> {
        (0..n)
            .map(|i| DocumentRecord {
                id: format!("d{i}"),
                tokens: vec![1],
            })
            .collect()
    }

    #[test]
    fn negative_sample_edge_cases() {
        let q = QueryRecord {
            id: "q".into(),
            tokens: vec![1],
        };
        let all = docs(100);
        let exclude: HashSet<String> = ["d0", "d1"].iter().map(|s| s.to_string()).collect();
        assert!(negative_sample(&q, &all, 0, 1, &exclude).unwrap().is_empty());

        let full = negative_sample(&q, &all, 98, 1, &exclude).unwrap();
        let got: HashSet<_> = full.iter().map(|t| t.doc_id.clone()).collect();
        let want: HashSet<_> = all
            .iter()
            .map(|d| d.id.clone())
            .filter(|id| !exclude.contains(id))
            .collect();
        assert_eq!(got, want);
        assert!(full.iter().all(|t| t.label == NR));

        assert!(matches!(
            negative_sample(&q, &all, 99, 1, &exclude),
            Err(Error::InsufficientCandidates {
                requested: 99,
                available: 98
            })
        ));
    }

    #[test]
    fn negative_sample_seeding() {
        let q = QueryRecord {
            id: "q".into(),
            tokens: vec![1],
        };
        let all = docs(100);
        let none = HashSet::new();
        let a = negative_sample(&q, &all, 5, 1, &none).unwrap();
        let b = negative_sample(&q, &all, 5, 1, &none).unwrap();
        let c = negative_sample(&q, &all, 5, 2, &none).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let distinct: HashSet<_> = a.iter().map(|t| &t.doc_id).collect();
        assert_eq!(distinct.len(), 5);
    }

    #[test]
    fn resample_negatives_avoids_attached_docs() {
        let mut corpus = fixture();
        corpus.documents.extend(docs(10).into_iter().map(|mut d| {
            d.id = format!("x{}", d.id);
            d
        }));
        let before = corpus.triples.len();
        resample_negatives(&mut corpus, 4, 3).unwrap();
        assert_eq!(corpus.triples.len(), before + 8);
        for t in &corpus.triples[before..] {
            let dup = corpus.triples[..before]
                .iter()
                .any(|o| o.query_id == t.query_id && o.doc_id == t.doc_id);
            assert!(!dup);
        }
    }
}
