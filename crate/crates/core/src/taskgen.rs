//! Turns query/click pairs into pretraining examples: geography-aware mask
//! plans over the joint `[CLS] q [SEP] c [SEP]` sequence, shuffled queries
//! with phrase/token order labels, geohash targets, and click-group
//! positives.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{confidence_score, Gazetteer, QueryClickPair};
use crate::geocode::{item_geohash_target, GeoError, GeohashCode, LatLon};
use crate::numerics::RngStream;
use crate::text::{
    self, detect_geo_phrases, PhraseRole, PhraseSpan, Span, TokenizedText, Vocab, CLS_ID, MASK_ID, NUM_SPECIAL,
    PAD_ID, SEP_ID,
};

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("need {wanted} distinct click items for a batch, corpus has {available}")]
    TooFewItems { wanted: usize, available: usize },
    #[error("no prepared examples")]
    Empty,
    #[error("item {item}: {source}")]
    Geo { item: u64, source: GeoError },
    #[error("unknown geography {0:?} in item")]
    UnknownGeo(String),
    #[error("shard line {line}: {source}")]
    Shard {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    /// Mask probability for a geography phrase named on both sides.
    pub geo_both_p: f64,
    /// Mask probability for a geography phrase named on one side only.
    pub geo_one_p: f64,
    pub token_p: f64,
    /// Mask exactly one side of each shared geography phrase instead of
    /// drawing both sides independently.
    pub geo_hard_xor: bool,
    pub token_shuffle_p: f64,
    pub max_phrases: usize,
    pub max_phrase_tokens: usize,
    pub group_cap: usize,
    pub max_query_len: usize,
    pub max_joint_len: usize,
    pub geohash_chars: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            geo_both_p: 0.5,
            geo_one_p: 0.3,
            token_p: 0.15,
            geo_hard_xor: false,
            token_shuffle_p: 0.15,
            max_phrases: 8,
            max_phrase_tokens: 8,
            group_cap: 5,
            max_query_len: 16,
            max_joint_len: 48,
            geohash_chars: 6,
        }
    }
}

/// Source of uniform draws in [0, 1). Lets tests script the randomness.
pub trait Uniform {
    fn uniform(&mut self) -> f64;

    fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }
}

impl Uniform for RngStream {
    fn uniform(&mut self) -> f64 {
        RngStream::uniform(self)
    }

    fn below(&mut self, n: usize) -> usize {
        RngStream::below(self, n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskAction {
    Mask,
    Random(u32),
    Keep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    /// Sorted positions in the joint sequence.
    pub positions: Vec<usize>,
    pub actions: Vec<MaskAction>,
    /// Original id at masked positions, `None` elsewhere; one per joint position.
    pub labels: Vec<Option<u32>>,
}

/// Joint layout `[CLS] q [SEP] c [SEP]`.
pub fn joint_ids(q: &[u32], c: &[u32]) -> Vec<u32> {
    let mut ids = Vec::with_capacity(q.len() + c.len() + 3);
    ids.push(CLS_ID);
    ids.extend_from_slice(q);
    ids.push(SEP_ID);
    ids.extend_from_slice(c);
    ids.push(SEP_ID);
    ids
}

fn span_name(tokens: &[String], s: &Span) -> String {
    tokens[s.start..=s.end].join(" ")
}

/// Geography-aware mask plan. Geo phrases present on both sides are masked
/// whole with `geo_both_p` per side, one-sided ones with `geo_one_p`, and
/// every other token independently with `token_p`. Selected positions are
/// replaced 80% `[MASK]`, 10% random token, 10% kept.
pub fn plan_geo_masks<U: Uniform>(
    q: &TokenizedText,
    c: &TokenizedText,
    vocab_size: usize,
    cfg: &TaskConfig,
    rng: &mut U,
) -> MaskPlan {
    let ids = joint_ids(&q.ids, &c.ids);
    let (q_off, c_off) = (1, q.ids.len() + 2);
    let q_names: HashSet<String> = q.geo_spans.iter().map(|s| span_name(&q.tokens, s)).collect();
    let c_names: HashSet<String> = c.geo_spans.iter().map(|s| span_name(&c.tokens, s)).collect();

    let mut selected = vec![false; ids.len()];
    let mut is_geo = vec![false; ids.len()];
    let mut xor_choice: HashMap<String, bool> = HashMap::new();
    for (side, text, off, other) in [(0, q, q_off, &c_names), (1, c, c_off, &q_names)] {
        for s in &text.geo_spans {
            let name = span_name(&text.tokens, s);
            let shared = other.contains(&name);
            let take = if shared && cfg.geo_hard_xor {
                // one draw per shared name decides which side is hidden
                let masked_q = *xor_choice
                    .entry(name)
                    .or_insert_with(|| rng.uniform() < 0.5);
                masked_q == (side == 0)
            } else {
                let p = if shared { cfg.geo_both_p } else { cfg.geo_one_p };
                rng.uniform() < p
            };
            for i in s.start..=s.end {
                is_geo[off + i] = true;
                selected[off + i] = take;
            }
        }
    }
    for (i, &id) in ids.iter().enumerate() {
        if !is_geo[i] && !text::is_special(id) && rng.uniform() < cfg.token_p {
            selected[i] = true;
        }
    }

    let mut plan = MaskPlan {
        positions: Vec::new(),
        actions: Vec::new(),
        labels: vec![None; ids.len()],
    };
    let n_regular = vocab_size.saturating_sub(NUM_SPECIAL).max(1);
    for (i, &id) in ids.iter().enumerate() {
        if !selected[i] || text::is_special(id) {
            continue;
        }
        let r = rng.uniform();
        let action = if r < 0.8 {
            MaskAction::Mask
        } else if r < 0.9 {
            MaskAction::Random((NUM_SPECIAL + rng.below(n_regular)) as u32)
        } else {
            MaskAction::Keep
        };
        plan.positions.push(i);
        plan.actions.push(action);
        plan.labels[i] = Some(id);
    }
    plan
}

impl MaskPlan {
    /// Joint ids with the plan's replacements applied.
    pub fn apply(&self, ids: &[u32]) -> Vec<u32> {
        let mut out = ids.to_vec();
        for (&p, a) in self.positions.iter().zip(&self.actions) {
            match a {
                MaskAction::Mask => out[p] = MASK_ID,
                MaskAction::Random(t) => out[p] = *t,
                MaskAction::Keep => {}
            }
        }
        out
    }
}

/// Per-token order labels of a shuffled query, both 1-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderLabels {
    pub phrase_order: Vec<usize>,
    pub token_order: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipReason {
    TooManyPhrases,
    PhraseTooLong,
    Empty,
}

/// Order labels for a given permutation. `phrase_perm[k]` is the original
/// index of the phrase placed k-th; `token_perms[p]` lists, for original
/// phrase `p`, the original in-phrase offsets in their new order.
/// Returns the original token index at each shuffled position plus labels.
pub fn label_permutation(
    phrases: &[PhraseSpan],
    phrase_perm: &[usize],
    token_perms: &[Vec<usize>],
) -> (Vec<usize>, OrderLabels) {
    let mut order = Vec::new();
    let mut labels = OrderLabels {
        phrase_order: Vec::new(),
        token_order: Vec::new(),
    };
    for &p in phrase_perm {
        let span = &phrases[p];
        for &t in &token_perms[p] {
            order.push(span.start + t);
            labels.phrase_order.push(p + 1);
            labels.token_order.push(t + 1);
        }
    }
    (order, labels)
}

/// Shuffle phrases uniformly, then shuffle the tokens of each phrase with
/// probability `token_shuffle_p`.
pub fn shuffle_and_label(
    phrases: &[PhraseSpan],
    rng: &mut RngStream,
    cfg: &TaskConfig,
) -> Result<(Vec<usize>, OrderLabels), SkipReason> {
    if phrases.is_empty() {
        return Err(SkipReason::Empty);
    }
    if phrases.len() > cfg.max_phrases {
        return Err(SkipReason::TooManyPhrases);
    }
    if phrases.iter().any(|p| p.len() > cfg.max_phrase_tokens) {
        return Err(SkipReason::PhraseTooLong);
    }
    let mut perm: Vec<usize> = (0..phrases.len()).collect();
    rng.shuffle(&mut perm);
    let token_perms: Vec<Vec<usize>> = phrases
        .iter()
        .map(|p| {
            let mut t: Vec<usize> = (0..p.len()).collect();
            if rng.bernoulli(cfg.token_shuffle_p) {
                rng.shuffle(&mut t);
            }
            t
        })
        .collect();
    Ok(label_permutation(phrases, &perm, &token_perms))
}

/// Fill tokens not covered by any phrase with single-token intent phrases so
/// that the phrases tile the query.
pub fn tile_phrases(len: usize, spans: &[PhraseSpan]) -> Vec<PhraseSpan> {
    let mut sorted: Vec<PhraseSpan> = spans.iter().copied().filter(|s| s.end < len).collect();
    sorted.sort_by_key(|s| s.start);
    let mut out = Vec::new();
    let mut next = 0;
    for s in sorted {
        if s.start < next {
            continue;
        }
        for i in next..s.start {
            out.push(PhraseSpan::from((i, i, PhraseRole::Intent)));
        }
        out.push(s);
        next = s.end + 1;
    }
    for i in next..len {
        out.push(PhraseSpan::from((i, i, PhraseRole::Intent)));
    }
    out
}

/// Identity labels of a query in its observed order.
pub fn identity_labels(phrases: &[PhraseSpan]) -> OrderLabels {
    let perm: Vec<usize> = (0..phrases.len()).collect();
    let tp: Vec<Vec<usize>> = phrases.iter().map(|p| (0..p.len()).collect()).collect();
    label_permutation(phrases, &perm, &tp).1
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClickGroup {
    pub item_id: u64,
    /// Indices into the pair list, best confidence first.
    pub members: Vec<usize>,
}

/// Queries grouped by clicked item, ranked by confidence score (stable),
/// truncated to `cap`. Groups come out in order of first appearance.
pub fn build_click_groups(pairs: &[QueryClickPair], cap: usize) -> Vec<ClickGroup> {
    group_ranked(pairs.iter().map(|p| (p.item_id, confidence_score(p))), cap)
}

fn group_ranked(scored: impl Iterator<Item = (u64, f64)>, cap: usize) -> Vec<ClickGroup> {
    let mut order: Vec<u64> = Vec::new();
    let mut members: HashMap<u64, Vec<(usize, f64)>> = HashMap::new();
    for (i, (item_id, score)) in scored.enumerate() {
        members
            .entry(item_id)
            .or_insert_with(|| {
                order.push(item_id);
                Vec::new()
            })
            .push((i, score));
    }
    order
        .into_iter()
        .map(|item_id| {
            let mut m = members.remove(&item_id).unwrap_or_default();
            m.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores"));
            m.truncate(cap);
            ClickGroup {
                item_id,
                members: m.into_iter().map(|(i, _)| i).collect(),
            }
        })
        .collect()
}

/// Uniform draw from the group; the anchor itself is a legal draw.
pub fn sample_positive(group: &ClickGroup, rng: &mut RngStream) -> usize {
    *rng.choose(&group.members)
}

/// A pair tokenized and annotated once, reused across epochs.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    /// Index of the source pair in the corpus.
    pub source: usize,
    pub item_id: u64,
    pub score: f64,
    pub query: TokenizedText,
    pub title: TokenizedText,
    pub geohash: GeohashCode,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepStats {
    pub kept: usize,
    pub too_long: usize,
}

/// Tokenize, annotate geography, and compute geohash targets. Pairs whose
/// joint sequence would not fit `max_joint_len` are dropped and counted.
pub fn prepare_pairs(
    pairs: &[QueryClickPair],
    vocab: &Vocab,
    gaz: &Gazetteer,
    cfg: &TaskConfig,
) -> Result<(Vec<PreparedPair>, PrepStats), TaskError> {
    let matcher = gaz.matcher();
    let mut out = Vec::with_capacity(pairs.len());
    let mut stats = PrepStats::default();
    for (source, p) in pairs.iter().enumerate() {
        let mut q = text::tokenize(&p.query, vocab);
        let mut c = text::tokenize(&p.item_title, vocab);
        if q.ids.len() + c.ids.len() + 3 > cfg.max_joint_len || q.ids.len() + 2 > cfg.max_query_len
        {
            stats.too_long += 1;
            continue;
        }
        q.geo_spans = detect_geo_phrases(&q.tokens, &matcher);
        q.phrase_spans = tile_phrases(q.ids.len(), &p.query_phrases);
        c.geo_spans = detect_geo_phrases(&c.tokens, &matcher);
        let locations: Vec<LatLon> = p
            .item_geo_entities
            .iter()
            .map(|n| {
                gaz.get(n)
                    .map(|e| e.location())
                    .ok_or_else(|| TaskError::UnknownGeo(n.clone()))
            })
            .collect::<Result<_, _>>()?;
        let geohash = item_geohash_target(&locations, cfg.geohash_chars).map_err(|source| {
            TaskError::Geo {
                item: p.item_id,
                source,
            }
        })?;
        out.push(PreparedPair {
            source,
            item_id: p.item_id,
            score: confidence_score(p),
            query: q,
            title: c,
            geohash,
        });
        stats.kept += 1;
    }
    Ok((out, stats))
}

/// Fully prepared training instance, all views padded to fixed lengths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainExample {
    pub masked_ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    /// Original id at masked positions.
    pub mlm_labels: Vec<Option<u32>>,
    pub geohash_target: String,
    pub shuffled_query_ids: Vec<u32>,
    pub shuffled_mask: Vec<u8>,
    /// `None` when the query exceeded the phrase limits.
    pub order_labels: Option<OrderLabels>,
    pub anchor_query_ids: Vec<u32>,
    pub anchor_mask: Vec<u8>,
    pub positive_query_ids: Vec<u32>,
    pub positive_mask: Vec<u8>,
}

/// Right-pad `ids` with `[PAD]`, returning ids and attention mask.
pub fn pad_to(ids: &[u32], len: usize) -> (Vec<u32>, Vec<u8>) {
    let mut out = ids.to_vec();
    let mut mask = vec![1u8; ids.len()];
    out.resize(len, PAD_ID);
    mask.resize(len, 0);
    (out, mask)
}

/// `[CLS] q [SEP]`
pub fn query_ids(q: &[u32]) -> Vec<u32> {
    let mut ids = Vec::with_capacity(q.len() + 2);
    ids.push(CLS_ID);
    ids.extend_from_slice(q);
    ids.push(SEP_ID);
    ids
}

/// Prepared pairs plus their click groups.
#[derive(Clone, Debug)]
pub struct PretrainData {
    pub pairs: Vec<PreparedPair>,
    pub groups: Vec<ClickGroup>,
    group_of_item: HashMap<u64, usize>,
    pub vocab_size: usize,
    pub cfg: TaskConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchStats {
    pub ptop_skipped: usize,
}

impl PretrainData {
    pub fn new(pairs: Vec<PreparedPair>, vocab_size: usize, cfg: TaskConfig) -> Self {
        let groups = group_ranked(pairs.iter().map(|p| (p.item_id, p.score)), cfg.group_cap);
        let group_of_item = groups
            .iter()
            .enumerate()
            .map(|(i, g)| (g.item_id, i))
            .collect();
        Self {
            pairs,
            groups,
            group_of_item,
            vocab_size,
            cfg,
        }
    }

    /// Builds the data set straight from corpus pairs.
    pub fn from_corpus(
        pairs: &[QueryClickPair],
        vocab: &Vocab,
        gaz: &Gazetteer,
        cfg: TaskConfig,
    ) -> Result<(Self, PrepStats), TaskError> {
        let (prepared, stats) = prepare_pairs(pairs, vocab, gaz, &cfg)?;
        Ok((Self::new(prepared, vocab.len(), cfg), stats))
    }

    pub fn group_of(&self, item_id: u64) -> &ClickGroup {
        &self.groups[self.group_of_item[&item_id]]
    }

    pub fn distinct_items(&self) -> usize {
        self.groups.len()
    }

    /// One example from a prepared pair.
    pub fn make_example(
        &self,
        anchor: usize,
        rng: &mut RngStream,
        stats: &mut BatchStats,
    ) -> PretrainExample {
        let cfg = &self.cfg;
        let p = &self.pairs[anchor];
        let plan = plan_geo_masks(&p.query, &p.title, self.vocab_size, cfg, rng);
        let joint = joint_ids(&p.query.ids, &p.title.ids);
        let masked = plan.apply(&joint);
        let (masked_ids, attention_mask) = pad_to(&masked, cfg.max_joint_len);
        let mut mlm_labels = plan.labels.clone();
        mlm_labels.resize(cfg.max_joint_len, None);

        let (shuffled, order_labels) = match shuffle_and_label(&p.query.phrase_spans, rng, cfg) {
            Ok((order, labels)) => (
                order.iter().map(|&i| p.query.ids[i]).collect::<Vec<_>>(),
                Some(labels),
            ),
            Err(_) => {
                stats.ptop_skipped += 1;
                (p.query.ids.clone(), None)
            }
        };
        let (shuffled_query_ids, shuffled_mask) = pad_to(&query_ids(&shuffled), cfg.max_query_len);

        let group = self.group_of(p.item_id);
        let pos = sample_positive(group, rng);
        let (anchor_query_ids, anchor_mask) = pad_to(&query_ids(&p.query.ids), cfg.max_query_len);
        let (positive_query_ids, positive_mask) =
            pad_to(&query_ids(&self.pairs[pos].query.ids), cfg.max_query_len);

        PretrainExample {
            masked_ids,
            attention_mask,
            mlm_labels,
            geohash_target: p.geohash.to_string(),
            shuffled_query_ids,
            shuffled_mask,
            order_labels,
            anchor_query_ids,
            anchor_mask,
            positive_query_ids,
            positive_mask,
        }
    }

    /// `batch_size` examples whose anchors all click different items, so
    /// every in-batch negative is a true negative.
    pub fn build_batch(
        &self,
        rng: &mut RngStream,
        batch_size: usize,
        stats: &mut BatchStats,
    ) -> Result<Vec<PretrainExample>, TaskError> {
        if self.pairs.is_empty() {
            return Err(TaskError::Empty);
        }
        if self.distinct_items() < batch_size {
            return Err(TaskError::TooFewItems {
                wanted: batch_size,
                available: self.distinct_items(),
            });
        }
        let mut items = HashSet::new();
        let mut anchors = Vec::with_capacity(batch_size);
        while anchors.len() < batch_size {
            let a = rng.below(self.pairs.len());
            if items.insert(self.pairs[a].item_id) {
                anchors.push(a);
            }
        }
        Ok(anchors
            .into_iter()
            .map(|a| self.make_example(a, rng, stats))
            .collect())
    }
}

pub fn write_shard(path: &Path, examples: &[PretrainExample]) -> Result<(), TaskError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for e in examples {
        serde_json::to_writer(&mut w, e).map_err(io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_shard(path: &Path) -> Result<Vec<PretrainExample>, TaskError> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| TaskError::Shard {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::GeoMatcher;

    /// Replays a fixed list of draws.
    struct Scripted(Vec<f64>, usize);

    impl Uniform for Scripted {
        fn uniform(&mut self) -> f64 {
            let v = self.0[self.1 % self.0.len()];
            self.1 += 1;
            v
        }
    }

    fn annotated(text: &str, vocab: &Vocab, m: &GeoMatcher) -> TokenizedText {
        let mut t = text::tokenize(text, vocab);
        t.geo_spans = detect_geo_phrases(&t.tokens, m);
        t
    }

    fn phrases(spec: &[(usize, usize)]) -> Vec<PhraseSpan> {
        spec.iter()
            .map(|&(a, b)| PhraseSpan::from((a, b, PhraseRole::Intent)))
            .collect()
    }

    fn shared_fixture() -> (TokenizedText, TokenizedText, Vocab) {
        let q = "package tour Hangzhou";
        let c = "one-day tour of Hangzhou including visiting West Lake";
        let vocab = Vocab::build([q, c]);
        let m = GeoMatcher::new(["Hangzhou", "West Lake"]);
        (annotated(q, &vocab, &m), annotated(c, &vocab, &m), vocab)
    }

    #[test]
    fn shared_geo_phrase_drawn_per_side() {
        let (q, c, vocab) = shared_fixture();
        // q-side Hangzhou draws 0.4 (masked), c-side Hangzhou 0.6 (visible),
        // West Lake 0.9 (visible), everything else 0.99.
        let mut draws = vec![0.4, 0.6, 0.9];
        draws.extend(std::iter::repeat_n(0.99, 40));
        let mut rng = Scripted(draws, 0);
        let plan = plan_geo_masks(&q, &c, vocab.len(), &TaskConfig::default(), &mut rng);
        // joint: [CLS] package tour Hangzhou [SEP] one-day tour of Hangzhou ...
        assert!(plan.positions.contains(&3));
        assert!(!plan.positions.contains(&8));
        assert_eq!(plan.labels[3], Some(vocab.id("Hangzhou")));
    }

    #[test]
    fn one_sided_geo_phrase_above_threshold_stays() {
        let (q, c, vocab) = shared_fixture();
        // Hangzhou(q) 0.9, Hangzhou(c) 0.9, West Lake (c only) 0.9
        let mut rng = Scripted(vec![0.9, 0.9, 0.9, 0.99], 0);
        let plan = plan_geo_masks(&q, &c, vocab.len(), &TaskConfig::default(), &mut rng);
        assert!(plan.positions.is_empty());
    }

    #[test]
    fn hard_xor_hides_exactly_one_side() {
        let (q, c, vocab) = shared_fixture();
        let cfg = TaskConfig {
            geo_hard_xor: true,
            token_p: 0.0,
            geo_one_p: 0.0,
            ..TaskConfig::default()
        };
        let mut rng = RngStream::new(5);
        for _ in 0..200 {
            let plan = plan_geo_masks(&q, &c, vocab.len(), &cfg, &mut rng);
            let q_side = plan.positions.contains(&3);
            let c_side = plan.positions.contains(&8);
            assert!(q_side ^ c_side);
        }
    }

    #[test]
    fn specials_never_masked() {
        let (q, c, vocab) = shared_fixture();
        let cfg = TaskConfig {
            token_p: 1.0,
            geo_both_p: 1.0,
            geo_one_p: 1.0,
            ..TaskConfig::default()
        };
        let plan = plan_geo_masks(&q, &c, vocab.len(), &cfg, &mut RngStream::new(1));
        let ids = joint_ids(&q.ids, &c.ids);
        assert_eq!(plan.positions.len(), ids.len() - 3);
        for p in &plan.positions {
            assert!(!text::is_special(ids[*p]));
        }
        assert_eq!(plan.actions.len(), plan.positions.len());
    }

    #[test]
    fn empty_texts_give_empty_plan() {
        let v = Vocab::build(["x"]);
        let e = text::tokenize("", &v);
        let plan = plan_geo_masks(&e, &e, v.len(), &TaskConfig::default(), &mut RngStream::new(0));
        assert!(plan.positions.is_empty());
    }

    #[test]
    fn worked_order_examples() {
        // "package tour Hangzhou" = [package tour] [Hangzhou]
        let ph = phrases(&[(0, 1), (2, 2)]);
        let ident = identity_labels(&ph);
        assert_eq!(ident.phrase_order, vec![1, 1, 2]);
        assert_eq!(ident.token_order, vec![1, 2, 1]);

        // "Hangzhou package tour"
        let (order, l) = label_permutation(&ph, &[1, 0], &[vec![0, 1], vec![0]]);
        assert_eq!(order, vec![2, 0, 1]);
        assert_eq!(l.phrase_order, vec![2, 1, 1]);

        // "Hangzhou tour package"
        let (order, l) = label_permutation(&ph, &[1, 0], &[vec![1, 0], vec![0]]);
        assert_eq!(order, vec![2, 1, 0]);
        assert_eq!(l.token_order, vec![1, 2, 1]);
    }

    #[test]
    fn over_limit_queries_are_skipped() {
        let cfg = TaskConfig {
            max_phrases: 2,
            max_phrase_tokens: 2,
            ..TaskConfig::default()
        };
        let mut rng = RngStream::new(0);
        assert_eq!(
            shuffle_and_label(&phrases(&[(0, 0), (1, 1), (2, 2)]), &mut rng, &cfg).unwrap_err(),
            SkipReason::TooManyPhrases
        );
        assert_eq!(
            shuffle_and_label(&phrases(&[(0, 2)]), &mut rng, &cfg).unwrap_err(),
            SkipReason::PhraseTooLong
        );
    }

    #[test]
    fn shuffled_labels_sort_back() {
        let ph = phrases(&[(0, 2), (3, 3), (4, 5), (6, 8)]);
        let cfg = TaskConfig {
            token_shuffle_p: 0.5,
            ..TaskConfig::default()
        };
        let mut rng = RngStream::new(9);
        for _ in 0..500 {
            let (order, l) = shuffle_and_label(&ph, &mut rng, &cfg).unwrap();
            let mut keyed: Vec<(usize, usize, usize)> = (0..order.len())
                .map(|i| (l.phrase_order[i], l.token_order[i], order[i]))
                .collect();
            keyed.sort_by_key(|k| (k.0, k.1));
            let restored: Vec<usize> = keyed.iter().map(|k| k.2).collect();
            assert_eq!(restored, (0..9).collect::<Vec<_>>());
            for i in 0..order.len() {
                assert!(l.token_order[i] <= ph[l.phrase_order[i] - 1].len());
            }
        }
    }

    #[test]
    fn tiling_fills_gaps() {
        let t = tile_phrases(5, &phrases(&[(1, 2)]));
        let bounds: Vec<(usize, usize)> = t.iter().map(|p| (p.start, p.end)).collect();
        assert_eq!(bounds, vec![(0, 0), (1, 2), (3, 3), (4, 4)]);
    }

    fn pair(item: u64, q: &str, uv_c: u64) -> QueryClickPair {
        QueryClickPair {
            item_id: item,
            query: q.into(),
            item_title: "title".into(),
            uv_c,
            uv_p: 0,
            query_phrases: vec![],
            item_geo_entities: vec![],
            clean_query: None,
        }
    }

    #[test]
    fn click_group_ranking_and_cap() {
        let mut ps = vec![pair(1, "solo", 3)];
        for (i, s) in [4, 9, 1, 7, 7, 2, 8].iter().enumerate() {
            ps.push(pair(2, &format!("q{i}"), *s));
        }
        let groups = build_click_groups(&ps, 5);
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].members, vec![0]);
        let scores: Vec<u64> = groups[1].members.iter().map(|&i| ps[i].uv_c).collect();
        assert_eq!(scores, vec![9, 8, 7, 7, 4]);
        // the two 7s keep input order
        assert_eq!(&groups[1].members[2..4], &[4, 5]);
    }

    #[test]
    fn positive_sampling() {
        let single = ClickGroup {
            item_id: 0,
            members: vec![7],
        };
        let mut rng = RngStream::new(3);
        assert_eq!(sample_positive(&single, &mut rng), 7);
        let g = ClickGroup {
            item_id: 0,
            members: vec![0, 1, 2],
        };
        let mut counts = [0usize; 3];
        for _ in 0..30_000 {
            counts[sample_positive(&g, &mut rng)] += 1;
        }
        for c in counts {
            assert!((c as f64 / 30_000.0 - 1.0 / 3.0).abs() < 0.02);
        }
        let mut a = RngStream::new(11);
        let mut b = RngStream::new(11);
        for _ in 0..10 {
            assert_eq!(sample_positive(&g, &mut a), sample_positive(&g, &mut b));
        }
    }

    #[test]
    fn padding_layout() {
        let (ids, mask) = pad_to(&[9, 10, 11], 8);
        assert_eq!(ids, vec![9, 10, 11, 0, 0, 0, 0, 0]);
        assert_eq!(mask, vec![1, 1, 1, 0, 0, 0, 0, 0]);
        let (ids, mask) = pad_to(&query_ids(&[9, 10, 11]), 8);
        assert_eq!(ids, vec![CLS_ID, 9, 10, 11, SEP_ID, 0, 0, 0]);
        assert_eq!(mask, vec![1, 1, 1, 1, 1, 0, 0, 0]);
        assert_eq!(joint_ids(&[9], &[10]), vec![CLS_ID, 9, SEP_ID, 10, SEP_ID]);
    }
}
