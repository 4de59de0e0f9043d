use smooth_clir::corpus::{generate_synthetic, load_split, write_split, SplitName, SyntheticConfig};
use smooth_clir::encoder::DualEncoder;
use smooth_clir::similarity::SimilarityConfig;
use smooth_clir::trainer::{evaluate, score_partition, train, TrainConfig};
use smooth_clir::Error;

fn corpus(n_queries: usize, seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        n_queries,
        seed,
        ..SyntheticConfig::default()
    }
}

#[test]
fn untrained_model_ranks_at_chance() {
    // Skewed query tokens repeat inside MR documents, which inflates their
    // encoded norm and so their chance of an extreme random score.
    let cfg = SyntheticConfig {
        query_zipf_exponent: 0.0,
        ..corpus(2000, 11)
    };
    let split = generate_synthetic(&cfg, 11).unwrap();
    let model = DualEncoder::init(split.vocab_a.size(), split.vocab_b.size(), 64, 12, 0.5 / 64.0).unwrap();
    let sim = SimilarityConfig::new(1.0).unwrap();
    let samples = score_partition(&model, &split, SplitName::Train, &sim).unwrap();
    let mut docs_per_query = std::collections::BTreeMap::<&str, usize>::new();
    for s in &samples {
        *docs_per_query.entry(&s.query_id).or_default() += 1;
    }
    // Each query's MR is on top with probability 1/n under a random order.
    let (mut mean, mut var) = (0.0, 0.0);
    for &n in docs_per_query.values() {
        let p = 1.0 / n as f64;
        mean += p;
        var += p * (1.0 - p);
    }
    let q = docs_per_query.len() as f64;
    let (mean, sigma) = (mean / q, var.sqrt() / q);
    let report = evaluate(&model, &split, SplitName::Train, &sim).unwrap();
    assert!(
        (report.p_mr_at_1 - mean).abs() <= 3.0 * sigma,
        "P_mr@1 {} vs chance {mean} ± {sigma}",
        report.p_mr_at_1
    );
}

#[test]
fn written_corpus_trains_like_the_generated_one() {
    let split = generate_synthetic(&corpus(60, 3), 3).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    write_split(tmp.path(), &split, None).unwrap();
    let reloaded = load_split(tmp.path()).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        dim: 8,
        ..TrainConfig::default()
    };
    let a = train(&cfg, &split).unwrap();
    let b = train(&cfg, &reloaded).unwrap();
    assert_eq!(a.manifest.to_jsonl(), b.manifest.to_jsonl());
    assert_eq!(a.final_checkpoint.to_text(), b.final_checkpoint.to_text());
}

#[test]
fn saved_run_has_all_artifacts() {
    let split = generate_synthetic(&corpus(40, 5), 5).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        dim: 4,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &split).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    out.save(tmp.path()).unwrap();
    for f in [
        "manifest.jsonl",
        "checkpoint_final.txt",
        "checkpoint_best.txt",
        "steps.tsv",
        "timing.json",
    ] {
        assert!(tmp.path().join(f).exists(), "missing {f}");
    }
    let manifest = std::fs::read_to_string(tmp.path().join("manifest.jsonl")).unwrap();
    assert!(!manifest.contains("elapsed"));
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let split = generate_synthetic(&corpus(40, 5), 5).unwrap();
    let model = DualEncoder::init(split.vocab_a.size() + 1, split.vocab_b.size(), 4, 0, 0.1).unwrap();
    let sim = SimilarityConfig::new(1.0).unwrap();
    assert!(matches!(
        evaluate(&model, &split, SplitName::Test, &sim),
        Err(Error::CheckpointMismatch(_))
    ));
}

#[test]
fn runtime_ceiling_never_fires_when_smooth() {
    let split = generate_synthetic(&corpus(100, 8), 8).unwrap();
    for epsilon in [0.25, 1.0, 2.0] {
        let cfg = TrainConfig {
            epsilon,
            epochs: 3,
            dim: 16,
            ..TrainConfig::default()
        };
        let out = train(&cfg, &split).unwrap();
        let ceiling = cfg.gradient_ceiling().unwrap();
        for e in &out.manifest.epochs {
            assert!(e.max_batch_grad_norm <= ceiling);
            assert!(e.max_scs_grad_norm <= 2.0 / epsilon + 1e-12);
        }
    }
}
