mod common;

use std::collections::{HashMap, HashSet};

use common::geohash_oracle;
use proptest::prelude::*;
use querylab::corpus::{
    confidence_score, filter_top, synthesize_corpus, synthesize_gazetteer, write_corpus, QueryClickPair,
    SynthConfig,
};
use querylab::geocode::{geohash_encode, item_geohash_target, GeohashCode, LatLon};
use querylab::numerics::RngStream;
use querylab::taskgen::{plan_geo_masks, shuffle_and_label, tile_phrases, PretrainData, TaskConfig};
use querylab::text::{self, Vocab};

fn small_synth(n_pairs: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        n_cities: 5,
        n_pois_per_city: 4,
        n_intents: 6,
        n_pairs,
        seed,
        ..SynthConfig::default()
    }
}

fn prepared(cfg: &SynthConfig) -> PretrainData {
    let gaz = synthesize_gazetteer(cfg).unwrap();
    let pairs = synthesize_corpus(cfg, &gaz).unwrap();
    let vocab = Vocab::build(pairs.iter().flat_map(|p| [p.query.as_str(), p.item_title.as_str()]));
    PretrainData::from_corpus(&pairs, &vocab, &gaz, TaskConfig::default()).unwrap().0
}

#[test]
fn geohash_matches_oracle_on_random_points() {
    let mut rng = RngStream::new(1);
    for _ in 0..1000 {
        let lat = rng.uniform() * 180.0 - 90.0;
        let lon = rng.uniform() * 360.0 - 180.0;
        let code = geohash_encode(LatLon::new(lat, lon).unwrap(), 6).unwrap();
        assert_eq!(code.as_str(), geohash_oracle(lat, lon, 6), "({lat}, {lon})");
    }
}

proptest! {
    #[test]
    fn points_in_one_cell_share_its_prefix(
        lat in -90.0f64..90.0,
        lon in -180.0f64..180.0,
        k in 1usize..=6,
        fx in 0.0f64..1.0,
        fy in 0.0f64..1.0,
    ) {
        // cell of (lat, lon) at precision k, from the oracle's integer grid
        let bits = 5 * k;
        let (lon_bits, lat_bits) = (bits.div_ceil(2), bits / 2);
        let w = 360.0 / (1u64 << lon_bits) as f64;
        let h = 180.0 / (1u64 << lat_bits) as f64;
        let x0 = ((lon + 180.0) / w).floor() * w - 180.0;
        let y0 = ((lat + 90.0) / h).floor() * h - 90.0;
        let inner = LatLon::new(y0 + fy * h, x0 + fx * w).unwrap();
        let a = geohash_encode(LatLon::new(lat, lon).unwrap(), 6).unwrap();
        let b = geohash_encode(inner, 6).unwrap();
        prop_assert_eq!(&a.as_str()[..k], &b.as_str()[..k]);
    }

    #[test]
    fn shorter_codes_are_prefixes(lat in -90.0f64..=90.0, lon in -180.0f64..=180.0, n in 1usize..12) {
        let p = LatLon::new(lat, lon).unwrap();
        let short = geohash_encode(p, n).unwrap();
        let long = geohash_encode(p, n + 1).unwrap();
        prop_assert!(long.as_str().starts_with(short.as_str()));
        prop_assert_eq!(short.as_str(), geohash_oracle(lat, lon, n));
    }

    #[test]
    fn item_targets_satisfy_pad_closure(points in prop::collection::vec((-90.0f64..90.0, -180.0f64..180.0), 0..5)) {
        let pts: Vec<LatLon> = points.iter().map(|&(a, b)| LatLon::new(a, b).unwrap()).collect();
        let code = item_geohash_target(&pts, 6).unwrap();
        prop_assert!(GeohashCode::parse(code.as_str()).is_ok());
        prop_assert_eq!(code.len(), 6);
    }

    #[test]
    fn filter_top_is_sorted(counts in prop::collection::vec((0u64..50, 0u64..5), 0..40), n in 0usize..50) {
        let pairs: Vec<QueryClickPair> = counts
            .iter()
            .enumerate()
            .map(|(i, &(c, p))| QueryClickPair {
                item_id: i as u64,
                query: format!("q{i}"),
                item_title: "t".into(),
                uv_c: c,
                uv_p: p,
                query_phrases: vec![],
                item_geo_entities: vec![],
                clean_query: None,
            })
            .collect();
        let top = filter_top(&pairs, n);
        prop_assert_eq!(top.len(), n.min(pairs.len()));
        for w in top.windows(2) {
            prop_assert!(confidence_score(&w[0]) >= confidence_score(&w[1]));
        }
    }
}

#[test]
fn default_corpus_geo_share_and_group_sizes() {
    let cfg = SynthConfig::default();
    let gaz = synthesize_gazetteer(&cfg).unwrap();
    let pairs = synthesize_corpus(&cfg, &gaz).unwrap();
    let m = gaz.matcher();
    let geo = pairs
        .iter()
        .filter(|p| !text::detect_geo_phrases(&p.query_tokens(), &m).is_empty())
        .count();
    let share = geo as f64 / pairs.len() as f64;
    assert!((share - 0.65).abs() <= 0.03, "geo query share {share}");
    let mut groups: HashMap<u64, HashSet<&str>> = HashMap::new();
    for p in &pairs {
        groups.entry(p.item_id).or_default().insert(&p.query);
    }
    assert!(groups.values().all(|g| g.len() >= cfg.queries_per_item_min));
}

#[test]
fn corpus_files_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for name in ["a.jsonl", "b.jsonl"] {
        let cfg = small_synth(500, 9);
        let gaz = synthesize_gazetteer(&cfg).unwrap();
        let path = dir.path().join(name);
        write_corpus(&path, &synthesize_corpus(&cfg, &gaz).unwrap()).unwrap();
        bytes.push((std::fs::read(&path).unwrap(), gaz.to_tsv()));
    }
    assert_eq!(bytes[0], bytes[1]);
    let other = small_synth(500, 10);
    let gaz = synthesize_gazetteer(&other).unwrap();
    let path = dir.path().join("c.jsonl");
    write_corpus(&path, &synthesize_corpus(&other, &gaz).unwrap()).unwrap();
    assert_ne!(std::fs::read(&path).unwrap(), bytes[0].0);
}

#[test]
fn mask_rates_hold_on_other_corpora() {
    for seed in [3, 4] {
        let data = prepared(&small_synth(4000, seed));
        let cfg = TaskConfig::default();
        let mut rng = RngStream::new(seed);
        let mut geo = (0usize, 0usize);
        let mut other = (0usize, 0usize);
        for p in &data.pairs {
            let plan = plan_geo_masks(&p.query, &p.title, data.vocab_size, &cfg, &mut rng);
            let set: HashSet<usize> = plan.positions.iter().copied().collect();
            let joint = querylab::taskgen::joint_ids(&p.query.ids, &p.title.ids);
            // specials never masked
            assert!(plan.positions.iter().all(|&i| !text::is_special(joint[i])));
            for (t, off) in [(&p.query, 1), (&p.title, p.query.ids.len() + 2)] {
                let in_geo: HashSet<usize> = t.geo_spans.iter().flat_map(|s| s.start..=s.end).collect();
                for i in 0..t.ids.len() {
                    let c = if in_geo.contains(&i) { &mut geo } else { &mut other };
                    c.1 += 1;
                    c.0 += set.contains(&(off + i)) as usize;
                }
            }
        }
        let other_rate = other.0 as f64 / other.1 as f64;
        let geo_rate = geo.0 as f64 / geo.1 as f64;
        assert!((other_rate - 0.15).abs() <= 0.01, "other {other_rate}");
        // every geo token is masked with 0.3 or 0.5
        assert!((0.28..=0.52).contains(&geo_rate), "geo {geo_rate}");
    }
}

#[test]
fn batches_are_deterministic_per_seed() {
    let data = prepared(&small_synth(300, 5));
    let draw = |seed| {
        let mut rng = RngStream::new(seed);
        (0..3)
            .map(|_| data.build_batch(&mut rng, 8, &mut Default::default()).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(draw(1), draw(1));
    assert_ne!(draw(1), draw(2));
}

#[test]
fn shuffled_queries_sort_back_randomized() {
    let data = prepared(&small_synth(600, 6));
    let cfg = TaskConfig {
        token_shuffle_p: 0.5,
        ..TaskConfig::default()
    };
    let mut rng = RngStream::new(8);
    let mut checked = 0;
    for p in &data.pairs {
        let phrases = tile_phrases(p.query.ids.len(), &p.query.phrase_spans);
        let Ok((order, labels)) = shuffle_and_label(&phrases, &mut rng, &cfg) else {
            continue;
        };
        let mut idx: Vec<usize> = (0..order.len()).collect();
        idx.sort_by_key(|&k| (labels.phrase_order[k], labels.token_order[k]));
        let restored: Vec<u32> = idx.iter().map(|&k| p.query.ids[order[k]]).collect();
        assert_eq!(restored, p.query.ids);
        checked += 1;
    }
    assert!(checked > 500);
}
