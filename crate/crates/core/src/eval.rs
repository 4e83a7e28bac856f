//! Probes and metrics: zero-shot click retrieval, masked-geography
//! prediction, order-error detection, pair similarity, city clustering of POI
//! embeddings, and the ablation comparison table.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::{confidence_score, Gazetteer, GeoKind, QueryClickPair};
use crate::model::{Model, ModelError, Task};
use crate::numerics::RngStream;
use crate::taskgen::{identity_labels, query_ids, tile_phrases};
use crate::text::{self, detect_geo_phrases, PhraseSpan, Vocab, MASK_ID};
use crate::train::{AblationManifest, Checkpoint, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("empty candidate pool")]
    EmptyPool,
    #[error("gold candidate {0} not in pool")]
    GoldOutsidePool(usize),
    #[error("cluster probe needs at least two groups, got {0}")]
    Degenerate(usize),
    #[error("missing checkpoint for {name}: {path}")]
    MissingCheckpoint { name: String, path: String },
    #[error("{file} line {line}: {source}")]
    Record {
        file: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

type Result<T> = std::result::Result<T, EvalError>;

/// Cap applied to the cluster ratio when the inter-group similarity vanishes.
pub const CLUSTER_RATIO_CAP: f64 = 1e6;

/// Named metrics for one probe over one model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: String,
    pub checkpoint: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

impl ProbeReport {
    fn new(task: &str) -> Self {
        Self {
            task: task.into(),
            ..Self::default()
        }
    }

    fn set(&mut self, name: &str, v: f64) {
        self.metrics.insert(name.into(), v);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// Panics on a missing metric; for callers that just built the report.
    pub fn metric(&self, name: &str) -> f64 {
        self.get(name)
            .unwrap_or_else(|| panic!("{} report has no {name}", self.task))
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Model plus vocabulary, turning texts into `[CLS] text [SEP]` inputs.
pub struct TextEncoder<'a> {
    pub model: &'a Model<f32>,
    pub vocab: &'a Vocab,
    pub batch: usize,
}

impl<'a> TextEncoder<'a> {
    pub fn new(model: &'a Model<f32>, vocab: &'a Vocab) -> Self {
        Self {
            model,
            vocab,
            batch: 64,
        }
    }

    pub fn ids(&self, text: &str) -> Vec<u32> {
        query_ids(&text::tokenize(text, self.vocab).ids)
    }

    /// One `[CLS]` representation per text.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let ids: Vec<Vec<u32>> = texts.iter().map(|t| self.ids(t)).collect();
        self.embed_ids(&ids)
    }

    pub fn embed_ids(&self, ids: &[Vec<u32>]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(ids.len());
        for chunk in ids.chunks(self.batch.max(1)) {
            let refs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
            let t = self.model.cls_embeddings(&refs)?;
            out.extend((0..t.rows()).map(|r| t.row(r).to_vec()));
        }
        Ok(out)
    }
}

/// Probe queries ranked against a candidate pool by cosine similarity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTask {
    pub probes: Vec<String>,
    pub pool: Vec<String>,
    /// Pool indices counted as correct for each probe.
    pub gold: Vec<Vec<usize>>,
    pub k: usize,
}

/// MR and MRR of 1-based ranks.
pub fn rank_metrics(ranks: &[usize]) -> (f64, f64) {
    if ranks.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = ranks.len() as f64;
    let mr = ranks.iter().map(|&r| r as f64).sum::<f64>() / n;
    let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
    (mr, mrr)
}

/// 1-based rank of `target` among `scores`, higher first, ties going to
/// the earlier index.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &x)| x > s || (x == s && i < target))
        .count()
}

fn hits_metrics(report: &mut ProbeReport, ranks: &[usize], k: usize) {
    let n = ranks.len().max(1) as f64;
    let hits = |c: usize| ranks.iter().filter(|&&r| r <= c).count() as f64 / n;
    report.set("acc", hits(1));
    report.set("hits@1", hits(1));
    report.set("hits@3", hits(3));
    report.set("hits@5", hits(5));
    report.set("hits@K", hits(k));
    report.set("k", k as f64);
    let (mr, mrr) = rank_metrics(ranks);
    report.set("mr", mr);
    report.set("mrr", mrr);
    report.set("probes", ranks.len() as f64);
}

/// Ranks every pool entry for each probe embedding and scores the best gold
/// rank. Returns the per-probe best gold rank and the report.
pub fn rank_by_cosine(
    probes: &[Vec<f32>],
    pool: &[Vec<f32>],
    gold: &[Vec<usize>],
    k: usize,
) -> Result<(Vec<usize>, ProbeReport)> {
    if pool.is_empty() {
        return Err(EvalError::EmptyPool);
    }
    let mut ranks = Vec::with_capacity(probes.len());
    for (p, golds) in probes.iter().zip(gold) {
        if let Some(&bad) = golds.iter().find(|&&g| g >= pool.len()) {
            return Err(EvalError::GoldOutsidePool(bad));
        }
        let scores: Vec<f64> = pool.iter().map(|c| cosine(p, c)).collect();
        let best = golds
            .iter()
            .map(|&g| rank_of(&scores, g))
            .min()
            .unwrap_or(pool.len() + 1);
        ranks.push(best);
    }
    let mut report = ProbeReport::new("retrieval");
    hits_metrics(&mut report, &ranks, k);
    report.set("pool", pool.len() as f64);
    Ok((ranks, report))
}

pub fn retrieve(task: &RetrievalTask, enc: &TextEncoder) -> Result<(Vec<usize>, ProbeReport)> {
    let probes = enc.embed(&task.probes)?;
    let pool = enc.embed(&task.pool)?;
    rank_by_cosine(&probes, &pool, &task.gold, task.k)
}

/// A query with one geography phrase to hide.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoMaskProbe {
    pub query: String,
    /// Inclusive token span of the hidden phrase.
    pub start: usize,
    pub end: usize,
}

/// Rank of the original token at every masked position within the MLM
/// vocabulary distribution, plus the number of probes skipped because their
/// span is out of range.
pub fn geo_mask_ranks(probes: &[GeoMaskProbe], enc: &TextEncoder) -> Result<(Vec<usize>, usize)> {
    let mut ranks = Vec::new();
    let mut skipped = 0usize;
    for chunk in probes.chunks(enc.batch.max(1)) {
        let mut seqs = Vec::new();
        let mut at = Vec::new();
        let mut golds = Vec::new();
        for p in chunk {
            let mut ids = enc.ids(&p.query);
            let n_tokens = ids.len() - 2;
            if p.start > p.end || p.end >= n_tokens {
                skipped += 1;
                continue;
            }
            let b = seqs.len();
            for t in p.start + 1..=p.end + 1 {
                golds.push(ids[t] as usize);
                ids[t] = MASK_ID;
                at.push((b, t));
            }
            seqs.push(ids);
        }
        if seqs.is_empty() {
            continue;
        }
        let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
        let logits = enc.model.mlm_logits(&refs, &at)?;
        for (r, &gold) in golds.iter().enumerate() {
            let scores: Vec<f64> = logits.row(r).iter().map(|&x| x as f64).collect();
            ranks.push(rank_of(&scores, gold));
        }
    }
    Ok((ranks, skipped))
}

/// Hits@1/3/5, MR and MRR of [`geo_mask_ranks`], one rank per masked token.
pub fn geo_mask_probe(probes: &[GeoMaskProbe], enc: &TextEncoder) -> Result<ProbeReport> {
    let (ranks, skipped) = geo_mask_ranks(probes, enc)?;
    let mut report = ProbeReport::new("geo_mask");
    hits_metrics(&mut report, &ranks, 5);
    report.set("skipped", skipped as f64);
    report.set("vocab", enc.vocab.len() as f64);
    Ok(report)
}

/// Uniform-null expectations for ranking a single gold among `n` candidates.
pub fn uniform_null_hits(k: usize, n: usize) -> f64 {
    (k.min(n)) as f64 / n as f64
}

/// A query labeled per token as transposed or clean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderProbe {
    pub query: String,
    pub phrases: Vec<PhraseSpan>,
    pub transposed: Vec<bool>,
}

/// Precision, recall and F1 over a positive class. An empty denominator
/// yields 1.0 and sets the matching zero-support flag.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn precision(&self) -> (f64, bool) {
        let d = self.tp + self.fp;
        if d == 0 {
            (1.0, true)
        } else {
            (self.tp as f64 / d as f64, false)
        }
    }

    pub fn recall(&self) -> (f64, bool) {
        let d = self.tp + self.fn_;
        if d == 0 {
            (1.0, true)
        } else {
            (self.tp as f64 / d as f64, false)
        }
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision().0, self.recall().0)
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Flags a token as transposed when the order heads' argmax labels differ
/// from the labels of the position it occupies.
pub fn order_probe(probes: &[OrderProbe], enc: &TextEncoder) -> Result<ProbeReport> {
    let cfg = enc.model.config();
    let mut conf = Confusion::default();
    let mut skipped = 0usize;
    for chunk in probes.chunks(enc.batch.max(1)) {
        let mut seqs = Vec::new();
        let mut at = Vec::new();
        let mut expected = Vec::new();
        let mut truth = Vec::new();
        for p in chunk {
            let ids = enc.ids(&p.query);
            let n = ids.len() - 2;
            let phrases = tile_phrases(n, &p.phrases);
            let too_big = phrases.len() > cfg.phrase_classes
                || phrases.iter().any(|s| s.len() > cfg.token_classes);
            if too_big || p.transposed.len() != n {
                skipped += 1;
                continue;
            }
            let labels = identity_labels(&phrases);
            let b = seqs.len();
            for i in 0..n {
                at.push((b, i + 1));
                expected.push((labels.phrase_order[i], labels.token_order[i]));
                truth.push(p.transposed[i]);
            }
            seqs.push(ids);
        }
        if seqs.is_empty() {
            continue;
        }
        let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
        let (alpha, beta) = enc.model.order_logits(&refs, &at)?;
        for r in 0..at.len() {
            let pred = (argmax(alpha.row(r)) + 1, argmax(beta.row(r)) + 1);
            conf.add(pred != expected[r], truth[r]);
        }
    }
    let mut report = ProbeReport::new("order");
    let (p, p_zero) = conf.precision();
    let (r, r_zero) = conf.recall();
    report.set("precision", p);
    report.set("recall", r);
    report.set("f1", f1(p, r));
    report.set("precision_zero_support", p_zero as u8 as f64);
    report.set("recall_zero_support", r_zero as u8 as f64);
    report.set("tokens", (conf.tp + conf.fp + conf.fn_ + conf.tn) as f64);
    report.set("transposed_tokens", (conf.tp + conf.fn_) as f64);
    report.set("skipped", skipped as f64);
    Ok(report)
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    /// Two queries that led to the same click item.
    ClickRelated,
    PhrasePermutation,
    TokenPermutation,
    /// Same query with the place swapped for another city.
    DifferentGeo,
    Random,
}

impl PairKind {
    pub const ALL: [PairKind; 5] = [
        PairKind::ClickRelated,
        PairKind::PhrasePermutation,
        PairKind::TokenPermutation,
        PairKind::DifferentGeo,
        PairKind::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PairKind::ClickRelated => "click_related",
            PairKind::PhrasePermutation => "phrase_permutation",
            PairKind::TokenPermutation => "token_permutation",
            PairKind::DifferentGeo => "different_geo",
            PairKind::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextPair {
    pub kind: PairKind,
    pub a: String,
    pub b: String,
}

/// Mean cosine per pair kind, plus click-related minus random as
/// `pos_uplift`.
pub fn similarity_probe(pairs: &[TextPair], enc: &TextEncoder) -> Result<ProbeReport> {
    let texts: Vec<String> = pairs.iter().flat_map(|p| [p.a.clone(), p.b.clone()]).collect();
    let vecs = enc.embed(&texts)?;
    let mut sums: BTreeMap<PairKind, (f64, usize)> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        let c = cosine(&vecs[2 * i], &vecs[2 * i + 1]);
        let e = sums.entry(p.kind).or_default();
        e.0 += c;
        e.1 += 1;
    }
    let mut report = ProbeReport::new("similarity");
    for (kind, (s, n)) in &sums {
        report.set(&format!("mean_cosine_{}", kind.name()), s / *n as f64);
        report.set(&format!("pairs_{}", kind.name()), *n as f64);
    }
    if let (Some(pos), Some(rand)) = (
        report.get("mean_cosine_click_related"),
        report.get("mean_cosine_random"),
    ) {
        report.set("mean_cosine_pos", pos);
        report.set("mean_cosine_rand", rand);
        report.set("pos_uplift", pos - rand);
    }
    Ok(report)
}

/// Mean intra-group over mean inter-group pairwise cosine. When the
/// inter-group mean is not positive (or the ratio would exceed the cap) the
/// result is [`CLUSTER_RATIO_CAP`].
pub fn cluster_ratio(vecs: &[Vec<f32>], groups: &[usize]) -> Result<(f64, f64, f64)> {
    let distinct: HashSet<usize> = groups.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(EvalError::Degenerate(distinct.len()));
    }
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..vecs.len() {
        for j in i + 1..vecs.len() {
            let c = cosine(&vecs[i], &vecs[j]);
            if groups[i] == groups[j] {
                intra += c;
                ni += 1;
            } else {
                inter += c;
                nx += 1;
            }
        }
    }
    let intra = if ni == 0 { 0.0 } else { intra / ni as f64 };
    let inter = inter / nx as f64;
    let ratio = if inter <= 0.0 || intra > inter * CLUSTER_RATIO_CAP {
        CLUSTER_RATIO_CAP
    } else {
        intra / inter
    };
    Ok((ratio, intra, inter))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoiRecord {
    pub name: String,
    pub city: String,
}

/// Cluster ratio of POI name embeddings grouped by city. Also returns the
/// raw embeddings in POI order.
pub fn cluster_probe(pois: &[PoiRecord], enc: &TextEncoder) -> Result<(ProbeReport, Vec<Vec<f32>>)> {
    let names: Vec<String> = pois.iter().map(|p| p.name.clone()).collect();
    let vecs = enc.embed(&names)?;
    let mut city_ids: HashMap<&str, usize> = HashMap::new();
    let groups: Vec<usize> = pois
        .iter()
        .map(|p| {
            let n = city_ids.len();
            *city_ids.entry(p.city.as_str()).or_insert(n)
        })
        .collect();
    let (ratio, intra, inter) = cluster_ratio(&vecs, &groups)?;
    let mut report = ProbeReport::new("cluster");
    report.set("cluster_ratio", ratio);
    report.set("mean_cosine_intra", intra);
    report.set("mean_cosine_inter", inter);
    report.set("groups", city_ids.len() as f64);
    report.set("points", pois.len() as f64);
    Ok((report, vecs))
}

/// Tab-separated `name, city, v0, v1, ...` rows for external projection.
pub fn write_embeddings(path: &Path, pois: &[PoiRecord], vecs: &[Vec<f32>]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (p, v) in pois.iter().zip(vecs) {
        write!(w, "{}\t{}", p.name, p.city)?;
        for x in v {
            write!(w, "\t{x}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Splits pairs into training and held-out sets by click item, so no
/// held-out item is seen in training.
pub fn holdout_split(
    pairs: &[QueryClickPair],
    fraction: f64,
    seed: u64,
) -> (Vec<QueryClickPair>, Vec<QueryClickPair>) {
    let mut items: Vec<u64> = pairs.iter().map(|p| p.item_id).collect();
    items.sort_unstable();
    items.dedup();
    let mut rng = RngStream::new(seed).derive(0x401d);
    rng.shuffle(&mut items);
    let n_held = (items.len() as f64 * fraction).round() as usize;
    let held: HashSet<u64> = items[..n_held].iter().copied().collect();
    pairs
        .iter()
        .cloned()
        .partition(|p| !held.contains(&p.item_id))
}

/// Every probe set, built from held-out pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSets {
    pub retrieval: RetrievalTask,
    pub geo_mask: Vec<GeoMaskProbe>,
    pub order: Vec<OrderProbe>,
    pub pairs: Vec<TextPair>,
    pub pois: Vec<PoiRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// Share of click items held out of training for probing.
    pub holdout_fraction: f64,
    pub k: usize,
    /// Pairs drawn per similarity kind.
    pub pairs_per_kind: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            holdout_fraction: 0.1,
            k: 20,
            pairs_per_kind: 1000,
            seed: 7,
        }
    }
}

fn join(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Builds the probe sets. Retrieval: the highest-confidence query of each
/// item forms the pool and the item's other queries are probes. Geo-mask:
/// queries naming a city followed by one of its POIs, with the city hidden.
/// Order: misinput queries plus as many clean ones. Pairs: drawn per kind.
pub fn build_probe_sets(heldout: &[QueryClickPair], gaz: &Gazetteer, cfg: &ProbeConfig) -> ProbeSets {
    let mut rng = RngStream::new(cfg.seed);

    // click groups in first-appearance order, best query first
    let mut order: Vec<u64> = Vec::new();
    let mut by_item: HashMap<u64, Vec<&QueryClickPair>> = HashMap::new();
    for p in heldout {
        by_item
            .entry(p.item_id)
            .or_insert_with(|| {
                order.push(p.item_id);
                Vec::new()
            })
            .push(p);
    }
    for qs in by_item.values_mut() {
        qs.sort_by(|a, b| confidence_score(b).total_cmp(&confidence_score(a)));
    }
    let mut retrieval = RetrievalTask {
        probes: Vec::new(),
        pool: Vec::new(),
        gold: Vec::new(),
        k: cfg.k,
    };
    for item in &order {
        let qs = &by_item[item];
        let pool_idx = retrieval.pool.len();
        retrieval.pool.push(qs[0].query.clone());
        for q in &qs[1..] {
            if q.query != qs[0].query {
                retrieval.probes.push(q.query.clone());
                retrieval.gold.push(vec![pool_idx]);
            }
        }
    }

    // geo mask: city directly followed by one of its POIs
    let matcher = gaz.matcher();
    let mut geo_mask = Vec::new();
    let mut seen = HashSet::new();
    for p in heldout {
        let toks = p.query_tokens();
        let spans = detect_geo_phrases(&toks, &matcher);
        for w in spans.windows(2) {
            let city = join(&toks[w[0].start..=w[0].end]);
            let poi = join(&toks[w[1].start..=w[1].end]);
            let is_pair = matches!(gaz.get(&city), Some(e) if e.kind == GeoKind::City)
                && gaz.get(&poi).and_then(|e| e.parent_city.as_deref()) == Some(city.as_str());
            if is_pair && seen.insert(p.query.clone()) {
                geo_mask.push(GeoMaskProbe {
                    query: p.query.clone(),
                    start: w[0].start,
                    end: w[0].end,
                });
            }
        }
    }

    // order: misinput queries with per-token truth, balanced by clean ones
    let mut order_probes = Vec::new();
    let mut clean = Vec::new();
    for p in heldout {
        let toks = p.query_tokens();
        match &p.clean_query {
            Some(c) => {
                let orig: Vec<&str> = c.split_whitespace().collect();
                if orig.len() != toks.len() {
                    continue;
                }
                order_probes.push(OrderProbe {
                    query: p.query.clone(),
                    phrases: p.query_phrases.clone(),
                    transposed: toks.iter().zip(&orig).map(|(a, b)| a != b).collect(),
                });
            }
            None => clean.push(OrderProbe {
                query: p.query.clone(),
                phrases: p.query_phrases.clone(),
                transposed: vec![false; toks.len()],
            }),
        }
    }
    rng.shuffle(&mut clean);
    clean.truncate(order_probes.len());
    order_probes.extend(clean);

    let pairs = build_pairs(heldout, &order, &by_item, gaz, cfg.pairs_per_kind, &mut rng);

    let pois = gaz
        .entries()
        .iter()
        .filter_map(|e| {
            e.parent_city.as_ref().map(|c| PoiRecord {
                name: e.name.clone(),
                city: c.clone(),
            })
        })
        .collect();

    ProbeSets {
        retrieval,
        geo_mask,
        order: order_probes,
        pairs,
        pois,
    }
}

fn build_pairs(
    heldout: &[QueryClickPair],
    items: &[u64],
    by_item: &HashMap<u64, Vec<&QueryClickPair>>,
    gaz: &Gazetteer,
    per_kind: usize,
    rng: &mut RngStream,
) -> Vec<TextPair> {
    let mut out = Vec::new();
    let multi: Vec<u64> = items
        .iter()
        .copied()
        .filter(|i| by_item[i].len() >= 2)
        .collect();
    let attempts = per_kind * 20;
    let mut push = |kind, a: String, b: String, n: &mut usize| {
        out.push(TextPair { kind, a, b });
        *n += 1;
    };

    let mut n = 0;
    for _ in 0..attempts {
        if n == per_kind || multi.is_empty() {
            break;
        }
        let qs = &by_item[rng.choose(&multi)];
        let i = rng.below(qs.len());
        let j = rng.below(qs.len());
        if i != j && qs[i].query != qs[j].query {
            push(PairKind::ClickRelated, qs[i].query.clone(), qs[j].query.clone(), &mut n);
        }
    }

    let mut n = 0;
    for _ in 0..attempts {
        if n == per_kind || heldout.len() < 2 {
            break;
        }
        let a = rng.choose(heldout);
        let b = rng.choose(heldout);
        if a.item_id != b.item_id {
            push(PairKind::Random, a.query.clone(), b.query.clone(), &mut n);
        }
    }

    let mut n = 0;
    for _ in 0..attempts {
        if n == per_kind || heldout.is_empty() {
            break;
        }
        let p = rng.choose(heldout);
        let toks = p.query_tokens();
        let phrases = tile_phrases(toks.len(), &p.query_phrases);
        if phrases.len() < 2 {
            continue;
        }
        let mut perm: Vec<usize> = (0..phrases.len()).collect();
        while perm.iter().enumerate().all(|(i, &x)| i == x) {
            rng.shuffle(&mut perm);
        }
        let shuffled: Vec<String> = perm
            .iter()
            .flat_map(|&k| toks[phrases[k].start..=phrases[k].end].iter().cloned())
            .collect();
        push(PairKind::PhrasePermutation, p.query.clone(), join(&shuffled), &mut n);
    }

    let mut n = 0;
    for _ in 0..attempts {
        if n == per_kind || heldout.is_empty() {
            break;
        }
        let p = rng.choose(heldout);
        let mut toks = p.query_tokens();
        let phrases = tile_phrases(toks.len(), &p.query_phrases);
        let long: Vec<&PhraseSpan> = phrases.iter().filter(|s| s.len() >= 2).collect();
        if long.is_empty() {
            continue;
        }
        let s = rng.choose(&long);
        let i = s.start + rng.below(s.len() - 1);
        if toks[i] == toks[i + 1] {
            continue;
        }
        toks.swap(i, i + 1);
        push(PairKind::TokenPermutation, p.query.clone(), join(&toks), &mut n);
    }

    let matcher = gaz.matcher();
    let cities: Vec<&str> = gaz.cities().map(|e| e.name.as_str()).collect();
    let mut n = 0;
    for _ in 0..attempts {
        if n == per_kind || heldout.is_empty() || cities.len() < 2 {
            break;
        }
        let p = rng.choose(heldout);
        let toks = p.query_tokens();
        let spans = detect_geo_phrases(&toks, &matcher);
        let Some(s) = spans.first() else { continue };
        let name = join(&toks[s.start..=s.end]);
        let other = loop {
            let c = *rng.choose(&cities);
            if c != name {
                break c;
            }
        };
        let mut swapped: Vec<String> = toks[..s.start].to_vec();
        swapped.extend(other.split_whitespace().map(str::to_string));
        swapped.extend_from_slice(&toks[s.end + 1..]);
        push(PairKind::DifferentGeo, p.query.clone(), join(&swapped), &mut n);
    }
    out
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| EvalError::Record {
            file: path.display().to_string(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct RetrievalRecord {
    query: String,
    gold: Vec<usize>,
}

impl ProbeSets {
    /// One line-record file per probe type under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("retrieval_pool.jsonl"), &self.retrieval.pool)?;
        let probes: Vec<RetrievalRecord> = self
            .retrieval
            .probes
            .iter()
            .zip(&self.retrieval.gold)
            .map(|(q, g)| RetrievalRecord {
                query: q.clone(),
                gold: g.clone(),
            })
            .collect();
        write_jsonl(&dir.join("retrieval_probes.jsonl"), &probes)?;
        fs::write(dir.join("retrieval_k.txt"), format!("{}\n", self.retrieval.k))?;
        write_jsonl(&dir.join("geo_mask.jsonl"), &self.geo_mask)?;
        write_jsonl(&dir.join("order.jsonl"), &self.order)?;
        write_jsonl(&dir.join("pairs.jsonl"), &self.pairs)?;
        write_jsonl(&dir.join("pois.jsonl"), &self.pois)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let records: Vec<RetrievalRecord> = read_jsonl(&dir.join("retrieval_probes.jsonl"))?;
        let k = fs::read_to_string(dir.join("retrieval_k.txt"))?
            .trim()
            .parse()
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "bad retrieval_k.txt"))?;
        Ok(Self {
            retrieval: RetrievalTask {
                pool: read_jsonl(&dir.join("retrieval_pool.jsonl"))?,
                probes: records.iter().map(|r| r.query.clone()).collect(),
                gold: records.into_iter().map(|r| r.gold).collect(),
                k,
            },
            geo_mask: read_jsonl(&dir.join("geo_mask.jsonl"))?,
            order: read_jsonl(&dir.join("order.jsonl"))?,
            pairs: read_jsonl(&dir.join("pairs.jsonl"))?,
            pois: read_jsonl(&dir.join("pois.jsonl"))?,
        })
    }
}

/// Runs every probe on one model.
pub fn evaluate(
    model: &Model<f32>,
    vocab: &Vocab,
    probes: &ProbeSets,
    checkpoint: &str,
    seed: u64,
) -> Result<Vec<ProbeReport>> {
    let enc = TextEncoder::new(model, vocab);
    let mut reports = vec![
        retrieve(&probes.retrieval, &enc)?.1,
        geo_mask_probe(&probes.geo_mask, &enc)?,
        order_probe(&probes.order, &enc)?,
        similarity_probe(&probes.pairs, &enc)?,
        cluster_probe(&probes.pois, &enc)?.0,
    ];
    for r in &mut reports {
        r.checkpoint = checkpoint.into();
        r.seed = seed;
    }
    Ok(reports)
}

pub fn write_reports(path: &Path, reports: &[ProbeReport]) -> Result<()> {
    write_jsonl(path, reports)
}

pub fn read_reports(path: &Path) -> Result<Vec<ProbeReport>> {
    read_jsonl(path)
}

/// Columns of the ablation table: (report task, metric).
pub const ABLATION_COLUMNS: [(&str, &str); 7] = [
    ("retrieval", "hits@K"),
    ("retrieval", "mrr"),
    ("geo_mask", "hits@5"),
    ("geo_mask", "mrr"),
    ("similarity", "pos_uplift"),
    ("cluster", "cluster_ratio"),
    ("order", "f1"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub disabled: Option<Task>,
    pub tasks: String,
    pub metrics: BTreeMap<String, f64>,
}

/// Evaluates every checkpoint in the manifest on the same probe sets.
pub fn ablation_report(
    manifest: &AblationManifest,
    vocab: &Vocab,
    probes: &ProbeSets,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for run in &manifest.runs {
        if !run.checkpoint.exists() {
            return Err(EvalError::MissingCheckpoint {
                name: run.name.clone(),
                path: run.checkpoint.display().to_string(),
            });
        }
        let ckpt = Checkpoint::load(&run.checkpoint)?;
        let reports = evaluate(&ckpt.model, vocab, probes, &run.name, seed)?;
        let mut metrics = BTreeMap::new();
        for (task, metric) in ABLATION_COLUMNS {
            if let Some(r) = reports.iter().find(|r| r.task == task) {
                metrics.insert(format!("{task}.{metric}"), r.metric(metric));
            }
        }
        rows.push(AblationRow {
            name: run.name.clone(),
            disabled: run.disabled,
            tasks: run.tasks.clone(),
            metrics,
        });
    }
    Ok(rows)
}

pub fn write_ablation_rows(path: &Path, rows: &[AblationRow]) -> Result<()> {
    write_jsonl(path, rows)
}

/// Aligned text table, one row per model.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut header = vec!["model".to_string(), "disabled".to_string(), "tasks".to_string()];
    header.extend(ABLATION_COLUMNS.iter().map(|(t, m)| format!("{t}.{m}")));
    let mut cells = vec![header];
    for r in rows {
        let mut line = vec![
            r.name.clone(),
            r.disabled.map_or("-".to_string(), |t| t.name().to_string()),
            r.tasks.clone(),
        ];
        for (t, m) in ABLATION_COLUMNS {
            line.push(
                r.metrics
                    .get(&format!("{t}.{m}"))
                    .map_or("-".into(), |v| format!("{v:.4}")),
            );
        }
        cells.push(line);
    }
    let widths: Vec<usize> = (0..cells[0].len())
        .map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (s, w))| {
                if i < 3 {
                    format!("{s:<w$}")
                } else {
                    format!("{s:>w$}")
                }
            })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_metric_examples() {
        assert_eq!(rank_metrics(&[1, 1, 1]), (1.0, 1.0));
        let (mr, mrr) = rank_metrics(&[1, 2, 4]);
        assert!((mr - 7.0 / 3.0).abs() < 1e-12);
        assert!((mrr - 1.75 / 3.0).abs() < 1e-12);
        assert_eq!(rank_metrics(&[10]), (10.0, 0.1));
    }

    #[test]
    fn ties_go_to_pool_order() {
        let s = [0.5, 0.9, 0.9, 0.1];
        assert_eq!(rank_of(&s, 1), 1);
        assert_eq!(rank_of(&s, 2), 2);
        assert_eq!(rank_of(&s, 0), 3);
        assert_eq!(rank_of(&s, 3), 4);
    }

    #[test]
    fn single_gold_pool_is_perfect() {
        let (_, r) = rank_by_cosine(&[vec![0.3, 1.0]], &[vec![-1.0, 2.0]], &[vec![0]], 20).unwrap();
        assert_eq!(r.metric("acc"), 1.0);
        assert!(rank_by_cosine(&[vec![1.0]], &[], &[vec![0]], 1).is_err());
        assert!(matches!(
            rank_by_cosine(&[vec![1.0]], &[vec![1.0]], &[vec![3]], 1),
            Err(EvalError::GoldOutsidePool(3))
        ));
    }

    #[test]
    fn hits_boundary_at_k() {
        // gold at rank exactly 2 with k = 2, then at rank 3
        let pool = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]];
        let probe = vec![vec![1.0, 0.0]];
        let (ranks, r) = rank_by_cosine(&probe, &pool, &[vec![1]], 2).unwrap();
        assert_eq!(ranks, vec![2]);
        assert_eq!(r.metric("hits@K"), 1.0);
        let (ranks, r) = rank_by_cosine(&probe, &pool, &[vec![2]], 2).unwrap();
        assert_eq!(ranks, vec![3]);
        assert_eq!(r.metric("hits@K"), 0.0);
    }

    #[test]
    fn confusion_conventions() {
        let mut c = Confusion::default();
        c.add(false, false);
        assert_eq!(c.precision(), (1.0, true));
        let mut c = Confusion::default();
        for i in 0..10 {
            c.add(true, i % 2 == 0);
        }
        assert_eq!(c.precision(), (0.5, false));
        assert_eq!(c.recall(), (1.0, false));
        assert!((f1(0.8, 0.9) - 0.847).abs() < 1e-3);
        assert_eq!(f1(0.0, 0.0), 0.0);
    }

    #[test]
    fn cluster_ratio_limits() {
        let v = vec![
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ];
        let (r, _, _) = cluster_ratio(&v, &[0, 0, 1, 1]).unwrap();
        assert_eq!(r, CLUSTER_RATIO_CAP);
        assert!(matches!(
            cluster_ratio(&v, &[0, 0, 0, 0]),
            Err(EvalError::Degenerate(1))
        ));
    }

    fn random_vecs(rng: &mut RngStream, n: usize, d: usize, f: impl Fn(&mut RngStream) -> f64) -> Vec<Vec<f32>> {
        (0..n).map(|_| (0..d).map(|_| f(rng) as f32).collect()).collect()
    }

    #[test]
    fn random_embeddings_match_uniform_null() {
        let mut rng = RngStream::new(11);
        let pool = random_vecs(&mut rng, 100, 32, |r| r.normal());
        let probes = random_vecs(&mut rng, 2000, 32, |r| r.normal());
        let gold: Vec<Vec<usize>> = (0..2000).map(|_| vec![rng.below(100)]).collect();
        let (_, r) = rank_by_cosine(&probes, &pool, &gold, 20).unwrap();
        let h = r.metric("hits@K");
        assert!((h - uniform_null_hits(20, 100)).abs() <= 0.03, "{h}");
    }

    #[test]
    fn rankings_ignore_common_rescaling() {
        let mut rng = RngStream::new(12);
        let pool = random_vecs(&mut rng, 30, 8, |r| r.normal());
        let probes = random_vecs(&mut rng, 50, 8, |r| r.normal());
        let gold: Vec<Vec<usize>> = (0..50).map(|i| vec![i % 30]).collect();
        let scale = |v: &[Vec<f32>]| -> Vec<Vec<f32>> {
            v.iter().map(|x| x.iter().map(|y| y * 8.0).collect()).collect()
        };
        let (a, ra) = rank_by_cosine(&probes, &pool, &gold, 5).unwrap();
        let (b, rb) = rank_by_cosine(&scale(&probes), &scale(&pool), &gold, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn metric_bounds_and_monotone_hits() {
        let mut rng = RngStream::new(13);
        let pool = random_vecs(&mut rng, 40, 6, |r| r.normal());
        let probes = random_vecs(&mut rng, 60, 6, |r| r.normal());
        let gold: Vec<Vec<usize>> = (0..60).map(|_| vec![rng.below(40)]).collect();
        let (_, r) = rank_by_cosine(&probes, &pool, &gold, 10).unwrap();
        assert!(r.metric("hits@1") <= r.metric("hits@3"));
        assert!(r.metric("hits@3") <= r.metric("hits@5"));
        assert!(r.metric("hits@5") <= r.metric("hits@K"));
        assert!(r.metric("mr") >= 1.0 && r.metric("mrr") <= 1.0);
    }

    #[test]
    fn random_cluster_null_is_near_one() {
        let mut rng = RngStream::new(14);
        let v = random_vecs(&mut rng, 100, 64, |r| r.uniform());
        let groups: Vec<usize> = (0..100).map(|i| i / 10).collect();
        let (ratio, _, _) = cluster_ratio(&v, &groups).unwrap();
        assert!((ratio - 1.0).abs() <= 0.1, "{ratio}");
    }

    #[test]
    fn random_pair_cosine_is_near_zero() {
        let mut rng = RngStream::new(15);
        let v = random_vecs(&mut rng, 400, 256, |r| r.normal());
        let mean = (0..200).map(|i| cosine(&v[2 * i], &v[2 * i + 1])).sum::<f64>() / 200.0;
        assert!(mean.abs() < 0.02, "{mean}");
    }

    fn tiny_model() -> (Model<f32>, Vocab) {
        let vocab = Vocab::build(["visit Lake Town", "ticket Old Palace tour", "hotel near Lake"]);
        let cfg = crate::model::EncoderConfig {
            vocab_size: vocab.len(),
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            max_len: 16,
            ..crate::model::EncoderConfig::default()
        };
        (Model::init(cfg, &mut RngStream::new(3)).unwrap(), vocab)
    }

    #[test]
    fn embeddings_are_batch_invariant_and_self_similar() {
        let (model, vocab) = tiny_model();
        let texts: Vec<String> = ["visit Lake Town", "hotel", "ticket Old Palace tour", "visit Lake Town"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut enc = TextEncoder::new(&model, &vocab);
        let all = enc.embed(&texts).unwrap();
        enc.batch = 1;
        let one_by_one = enc.embed(&texts).unwrap();
        assert_eq!(all, one_by_one);
        assert_eq!(all[0], all[3]);
        assert!((cosine(&all[0], &all[0]) - 1.0).abs() < 1e-12);
        let pairs: Vec<TextPair> = texts
            .iter()
            .map(|t| TextPair {
                kind: PairKind::ClickRelated,
                a: t.clone(),
                b: t.clone(),
            })
            .collect();
        let r = similarity_probe(&pairs, &enc).unwrap();
        assert!((r.metric("mean_cosine_click_related") - 1.0).abs() < 1e-9);
    }

    #[test]
    fn embedding_export_has_one_row_per_poi() {
        let (model, vocab) = tiny_model();
        let pois: Vec<PoiRecord> = [("Lake Town", "A"), ("Old Palace", "A"), ("Town", "B"), ("Palace", "B")]
            .iter()
            .map(|(n, c)| PoiRecord {
                name: n.to_string(),
                city: c.to_string(),
            })
            .collect();
        let enc = TextEncoder::new(&model, &vocab);
        let (r, vecs) = cluster_probe(&pois, &enc).unwrap();
        assert_eq!(r.metric("groups"), 2.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.tsv");
        write_embeddings(&path, &pois, &vecs).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), pois.len());
        assert_eq!(text.lines().next().unwrap().split('\t').count(), 2 + 8);
    }

    #[test]
    fn over_length_text_is_an_error() {
        let (model, vocab) = tiny_model();
        let enc = TextEncoder::new(&model, &vocab);
        let long = vec!["visit Lake Town ".repeat(10)];
        assert!(enc.embed(&long).is_err());
    }

    #[test]
    fn aligned_table_shape() {
        let rows: Vec<AblationRow> = ["full", "no_ucbl"]
            .iter()
            .map(|n| AblationRow {
                name: n.to_string(),
                disabled: (*n != "full").then_some(Task::Ucbl),
                tasks: "1111".into(),
                metrics: BTreeMap::from([("order.f1".to_string(), 0.5)]),
            })
            .collect();
        let t = ablation_table(&rows);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("no_ucbl"));
        assert!(lines[2].contains("ucbl"));
        assert!(lines[1].contains("0.5000"));
    }
}
