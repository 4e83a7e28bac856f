use std::collections::HashSet;

use querylab::corpus::{synthesize_corpus, synthesize_gazetteer, Gazetteer, QueryClickPair, SynthConfig};
use querylab::eval::{
    ablation_report, ablation_table, build_probe_sets, geo_mask_ranks, holdout_split, EvalError, ProbeConfig,
    ProbeSets, TextEncoder,
};
use querylab::model::{EncoderConfig, Model};
use querylab::numerics::RngStream;
use querylab::taskgen::{PretrainData, TaskConfig};
use querylab::text::Vocab;
use querylab::train::{ablation_suite, AblationManifest, TrainConfig};

struct Setup {
    gaz: Gazetteer,
    train: Vec<QueryClickPair>,
    heldout: Vec<QueryClickPair>,
    vocab: Vocab,
}

fn setup(n_pairs: usize, fraction: f64) -> Setup {
    let cfg = SynthConfig {
        n_pairs,
        ..SynthConfig::default()
    };
    let gaz = synthesize_gazetteer(&cfg).unwrap();
    let pairs = synthesize_corpus(&cfg, &gaz).unwrap();
    let (train, heldout) = holdout_split(&pairs, fraction, 1);
    let vocab = Vocab::build(
        train
            .iter()
            .flat_map(|p| [p.query.as_str(), p.item_title.as_str()])
            .chain(gaz.entries().iter().map(|e| e.name.as_str())),
    );
    Setup {
        gaz,
        train,
        heldout,
        vocab,
    }
}

fn encoder(vocab: &Vocab) -> EncoderConfig {
    EncoderConfig {
        vocab_size: vocab.len(),
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        ..EncoderConfig::default()
    }
}

#[test]
fn holdout_split_is_by_item() {
    let s = setup(1000, 0.2);
    let a: HashSet<u64> = s.train.iter().map(|p| p.item_id).collect();
    let b: HashSet<u64> = s.heldout.iter().map(|p| p.item_id).collect();
    assert!(a.is_disjoint(&b));
    assert_eq!(s.train.len() + s.heldout.len(), 1000);
    let share = b.len() as f64 / (a.len() + b.len()) as f64;
    assert!((share - 0.2).abs() < 0.01, "{share}");
}

#[test]
fn probe_sets_round_trip_and_keep_gold_in_pool() {
    let s = setup(2000, 0.2);
    let sets = build_probe_sets(&s.heldout, &s.gaz, &ProbeConfig::default());
    let r = &sets.retrieval;
    assert!(!r.probes.is_empty() && r.probes.len() == r.gold.len());
    assert!(r.gold.iter().flatten().all(|&g| g < r.pool.len()));
    assert!(!sets.geo_mask.is_empty() && !sets.order.is_empty());
    assert_eq!(sets.pois.len(), 100);
    for kind in querylab::eval::PairKind::ALL {
        assert!(sets.pairs.iter().any(|p| p.kind == kind), "{kind:?}");
    }
    let dir = tempfile::tempdir().unwrap();
    sets.save(dir.path()).unwrap();
    assert_eq!(ProbeSets::load(dir.path()).unwrap(), sets);
}

/// Untrained MLM heads rank the hidden city like a uniform draw over the
/// vocabulary. One rank per initialization seed keeps samples independent.
#[test]
fn untrained_geo_mask_ranks_follow_the_uniform_null() {
    let s = setup(3000, 0.3);
    let sets = build_probe_sets(&s.heldout, &s.gaz, &ProbeConfig::default());
    assert!(sets.geo_mask.len() >= 10);
    let v = s.vocab.len();
    let n = 300;
    let bins = 10;
    let mut counts = vec![0usize; bins];
    let mut rank_sum = 0.0;
    for seed in 0..n {
        let model = Model::<f32>::init(encoder(&s.vocab), &mut RngStream::new(1000 + seed as u64)).unwrap();
        let enc = TextEncoder::new(&model, &s.vocab);
        let probe = &sets.geo_mask[seed % sets.geo_mask.len()];
        let (ranks, skipped) = geo_mask_ranks(std::slice::from_ref(probe), &enc).unwrap();
        assert_eq!((ranks.len(), skipped), (1, 0));
        rank_sum += ranks[0] as f64;
        counts[((ranks[0] - 1) * bins / v).min(bins - 1)] += 1;
    }
    // expected count per bin from the exact bin widths
    let chi2: f64 = (0..bins)
        .map(|b| {
            let lo = (b * v).div_ceil(bins);
            let hi = ((b + 1) * v).div_ceil(bins);
            let e = n as f64 * (hi - lo) as f64 / v as f64;
            (counts[b] as f64 - e).powi(2) / e
        })
        .sum();
    // chi-square, 9 degrees of freedom, p = 0.001
    assert!(chi2 < 27.88, "chi2 {chi2}, counts {counts:?}");
    let mr = rank_sum / n as f64;
    let null = (v + 1) as f64 / 2.0;
    let sd = (((v * v - 1) as f64) / 12.0 / n as f64).sqrt();
    assert!((mr - null).abs() < 4.0 * sd, "MR {mr} vs {null}");
}

#[test]
fn ablation_report_rows_and_errors() {
    let s = setup(600, 0.2);
    let (data, _) = PretrainData::from_corpus(&s.train, &s.vocab, &s.gaz, TaskConfig::default()).unwrap();
    let sets = build_probe_sets(&s.heldout, &s.gaz, &ProbeConfig::default());
    let dir = tempfile::tempdir().unwrap();
    let base = TrainConfig {
        total_steps: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let manifest = ablation_suite(&data, &encoder(&s.vocab), &base, dir.path(), false).unwrap();
    assert_eq!(AblationManifest::load(dir.path()).unwrap(), manifest);
    let rows = ablation_report(&manifest, &s.vocab, &sets, 7).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(ablation_report(&manifest, &s.vocab, &sets, 7).unwrap(), rows);
    let table = ablation_table(&rows);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 6);
    for (line, name) in lines[2..].iter().zip(["geo_mp", "geo_cp", "ucbl", "ptop"]) {
        assert_eq!(line.split_whitespace().nth(1), Some(name));
    }

    let mut broken = manifest.clone();
    broken.runs[2].checkpoint = dir.path().join("nowhere.ckpt");
    match ablation_report(&broken, &s.vocab, &sets, 7) {
        Err(e @ EvalError::MissingCheckpoint { .. }) => assert!(e.to_string().contains("no_geo_cp")),
        other => panic!("expected a missing-checkpoint error, got {other:?}"),
    }
}
