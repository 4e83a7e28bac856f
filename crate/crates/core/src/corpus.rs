//! Gazetteer handling, synthetic search-log generation, and confidence
//! filtering of query/click pairs.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geocode::LatLon;
use crate::numerics::RngStream;
use crate::text::{GeoMatcher, PhraseRole, PhraseSpan};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("gazetteer line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("gazetteer line {line}: coordinate ({lat}, {lon}) out of range")]
    Range { line: usize, lat: f64, lon: f64 },
    #[error("gazetteer line {line}: duplicate name {name:?}")]
    Duplicate { line: usize, name: String },
    #[error("gazetteer line {line}: {reason}")]
    Parent { line: usize, reason: String },
    #[error("gazetteer is empty")]
    EmptyGazetteer,
    #[error("infeasible synthesis config: {0}")]
    Infeasible(String),
    #[error("corpus line {line}: {source}")]
    Record {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeoKind {
    City,
    Poi,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeoEntry {
    pub name: String,
    pub kind: GeoKind,
    pub lat: f64,
    pub lon: f64,
    pub parent_city: Option<String>,
}

impl GeoEntry {
    pub fn location(&self) -> LatLon {
        LatLon::new(self.lat, self.lon).expect("validated on load")
    }
}

/// Maximum distance, in degrees per axis, between a POI and its city.
pub const POI_RADIUS_DEG: f64 = 0.5;

#[derive(Clone, Debug, Default)]
pub struct Gazetteer {
    entries: Vec<GeoEntry>,
    by_name: HashMap<String, usize>,
}

impl Gazetteer {
    /// Validates every entry; POIs may precede their city in `entries`.
    pub fn new(entries: Vec<GeoEntry>) -> Result<Self, CorpusError> {
        let lines: Vec<usize> = (1..=entries.len()).collect();
        Self::with_lines(entries, &lines)
    }

    fn with_lines(entries: Vec<GeoEntry>, lines: &[usize]) -> Result<Self, CorpusError> {
        let mut by_name = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if LatLon::new(e.lat, e.lon).is_err() {
                return Err(CorpusError::Range {
                    line: lines[i],
                    lat: e.lat,
                    lon: e.lon,
                });
            }
            if by_name.insert(e.name.clone(), i).is_some() {
                return Err(CorpusError::Duplicate {
                    line: lines[i],
                    name: e.name.clone(),
                });
            }
        }
        for (i, e) in entries.iter().enumerate() {
            let line = lines[i];
            match (e.kind, &e.parent_city) {
                (GeoKind::City, None) => {}
                (GeoKind::City, Some(_)) => {
                    return Err(CorpusError::Parent {
                        line,
                        reason: "a city cannot have a parent".into(),
                    })
                }
                (GeoKind::Poi, None) => {
                    return Err(CorpusError::Parent {
                        line,
                        reason: format!("POI {:?} has no parent city", e.name),
                    })
                }
                (GeoKind::Poi, Some(p)) => {
                    let parent = by_name
                        .get(p)
                        .map(|&j| &entries[j])
                        .filter(|c| c.kind == GeoKind::City)
                        .ok_or_else(|| CorpusError::Parent {
                            line,
                            reason: format!("unknown parent city {p:?}"),
                        })?;
                    if (parent.lat - e.lat).abs() > POI_RADIUS_DEG
                        || (parent.lon - e.lon).abs() > POI_RADIUS_DEG
                    {
                        return Err(CorpusError::Parent {
                            line,
                            reason: format!("POI {:?} lies too far from {p:?}", e.name),
                        });
                    }
                }
            }
        }
        Ok(Self { entries, by_name })
    }

    /// Tab-separated `name kind lat lon parent_city`, `-` for no parent.
    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut entries = Vec::new();
        let mut lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.starts_with('#') || raw.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = raw.split('\t').collect();
            if fields.len() != 5 {
                return Err(CorpusError::Malformed {
                    line,
                    reason: format!("expected 5 tab-separated fields, found {}", fields.len()),
                });
            }
            let name = fields[0].split_whitespace().collect::<Vec<_>>().join(" ");
            if name.is_empty() {
                return Err(CorpusError::Malformed {
                    line,
                    reason: "empty name".into(),
                });
            }
            let kind = match fields[1] {
                "city" => GeoKind::City,
                "poi" => GeoKind::Poi,
                other => {
                    return Err(CorpusError::Malformed {
                        line,
                        reason: format!("unknown kind {other:?}"),
                    })
                }
            };
            let num = |s: &str| {
                s.trim().parse::<f64>().map_err(|_| CorpusError::Malformed {
                    line,
                    reason: format!("bad coordinate {s:?}"),
                })
            };
            let (lat, lon) = (num(fields[2])?, num(fields[3])?);
            let parent_city = match fields[4].trim() {
                "-" => None,
                p => Some(p.to_string()),
            };
            entries.push(GeoEntry {
                name,
                kind,
                lat,
                lon,
                parent_city,
            });
            lines.push(line);
        }
        Self::with_lines(entries, &lines)
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# name\tkind\tlat\tlon\tparent_city\n");
        for e in &self.entries {
            let kind = match e.kind {
                GeoKind::City => "city",
                GeoKind::Poi => "poi",
            };
            out.push_str(&format!(
                "{}\t{}\t{:.5}\t{:.5}\t{}\n",
                e.name,
                kind,
                e.lat,
                e.lon,
                e.parent_city.as_deref().unwrap_or("-")
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        fs::write(path, self.to_tsv())
    }

    pub fn entries(&self) -> &[GeoEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&GeoEntry> {
        self.by_name.get(name).map(|&i| &self.entries[i])
    }

    pub fn cities(&self) -> impl Iterator<Item = &GeoEntry> {
        self.entries.iter().filter(|e| e.kind == GeoKind::City)
    }

    pub fn pois_of<'a>(&'a self, city: &'a str) -> impl Iterator<Item = &'a GeoEntry> {
        self.entries
            .iter()
            .filter(move |e| e.parent_city.as_deref() == Some(city))
    }

    pub fn matcher(&self) -> GeoMatcher {
        GeoMatcher::new(self.entries.iter().map(|e| e.name.as_str()))
    }
}

/// Free-function form of [`Gazetteer::load`].
pub fn load_gazetteer(path: &Path) -> Result<Gazetteer, CorpusError> {
    Gazetteer::load(path)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryClickPair {
    pub item_id: u64,
    pub query: String,
    pub item_title: String,
    pub uv_c: u64,
    pub uv_p: u64,
    pub query_phrases: Vec<PhraseSpan>,
    pub item_geo_entities: Vec<String>,
    /// Original query when `query` carries a simulated adjacent-token transposition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_query: Option<String>,
}

impl QueryClickPair {
    pub fn query_tokens(&self) -> Vec<String> {
        self.query.split_whitespace().map(str::to_string).collect()
    }

    pub fn title_tokens(&self) -> Vec<String> {
        self.item_title.split_whitespace().map(str::to_string).collect()
    }

    pub fn is_misinput(&self) -> bool {
        self.clean_query.is_some()
    }
}

/// Weighted confidence `uv_c + 10 * uv_p`.
pub fn confidence_score(pair: &QueryClickPair) -> f64 {
    pair.uv_c as f64 + 10.0 * pair.uv_p as f64
}

/// The `n` highest-scoring pairs; equal scores keep input order.
pub fn filter_top(pairs: &[QueryClickPair], n: usize) -> Vec<QueryClickPair> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| {
        confidence_score(&pairs[b])
            .partial_cmp(&confidence_score(&pairs[a]))
            .expect("scores are finite")
    });
    order.into_iter().take(n).map(|i| pairs[i].clone()).collect()
}

pub fn write_corpus(path: &Path, pairs: &[QueryClickPair]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut w, p).map_err(io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<QueryClickPair>, CorpusError> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line_text = line?;
        if line_text.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line_text).map_err(|source| CorpusError::Record {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_cities: usize,
    pub n_pois_per_city: usize,
    pub n_intents: usize,
    pub n_pairs: usize,
    pub queries_per_item_min: usize,
    pub queries_per_item_max: usize,
    pub misinput_rate: f64,
    /// Target fraction of queries naming a place.
    pub geo_query_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_cities: 10,
            n_pois_per_city: 10,
            n_intents: 12,
            n_pairs: 20_000,
            queries_per_item_min: 2,
            queries_per_item_max: 6,
            misinput_rate: 0.05,
            geo_query_rate: 0.65,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::Infeasible(m.to_string()));
        if self.n_cities == 0 || self.n_intents == 0 {
            return bad("n_cities and n_intents must be positive");
        }
        if self.queries_per_item_min == 0 || self.queries_per_item_min > self.queries_per_item_max {
            return bad("need 1 <= queries_per_item_min <= queries_per_item_max");
        }
        for (name, r) in [
            ("misinput_rate", self.misinput_rate),
            ("geo_query_rate", self.geo_query_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(CorpusError::Infeasible(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.geo_query_rate > ITEM_GEO_SHARE {
            return Err(CorpusError::Infeasible(format!(
                "geo_query_rate above {ITEM_GEO_SHARE} cannot be reached"
            )));
        }
        if self.n_intents > INTENTS.len() {
            return Err(CorpusError::Infeasible(format!(
                "at most {} intents are available",
                INTENTS.len()
            )));
        }
        Ok(())
    }
}

// Surface forms per intent; the first one is used in item titles.
const INTENTS: &[&[&str]] = &[
    &["package tour", "group tour", "guided trip"],
    &["hotel", "hotel booking", "place to stay"],
    &["admission ticket", "entry pass", "ticket"],
    &["one-day tour", "day trip", "single day excursion"],
    &["food tour", "local food", "street snacks"],
    &["car rental", "rent a car", "self drive"],
    &["boat cruise", "river cruise", "cruise"],
    &["hiking route", "trekking trail", "mountain walk"],
    &["night tour", "night view", "evening lights"],
    &["photo shoot", "travel photos", "portrait session"],
    &["spa resort", "hot spring", "thermal bath"],
    &["airport transfer", "airport pickup", "shuttle bus"],
    &["family trip", "kids holiday", "parent child tour"],
    &["honeymoon package", "couple trip", "romantic getaway"],
    &["museum pass", "exhibition ticket", "gallery visit"],
    &["ski trip", "snow holiday", "ski pass"],
];

const MODIFIERS: &[&str] = &[
    "cheap", "weekend", "luxury", "discount", "private", "budget", "summer", "winter", "best",
];

const POI_TYPES: &[&str] = &[
    "Lake", "Temple", "Tower", "Park", "Museum", "Garden", "Mountain", "Bridge", "Palace", "Gorge",
    "Island", "Street",
];

const ONSETS: &[&str] = &[
    "b", "ch", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "q", "r", "s", "sh", "t", "w", "x",
    "y", "z",
];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ai", "an", "ao", "en", "ing", "ong", "ui"];

/// Fraction of items that name at least one place.
const ITEM_GEO_SHARE: f64 = 0.9;
/// Proportion of items naming exactly one place (the rest of the geo share names two or more).
const ITEM_SINGLE_GEO: f64 = 0.6;

fn syllable_word(rng: &mut RngStream, syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(rng.choose(ONSETS));
        w.push_str(rng.choose(NUCLEI));
    }
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => w,
    }
}

/// Random world: cities spread over a 27-degree square, POIs scattered
/// within a few tenths of a degree of their city.
pub fn synthesize_gazetteer(cfg: &SynthConfig) -> Result<Gazetteer, CorpusError> {
    cfg.validate()?;
    let namespace = ONSETS.len() * NUCLEI.len();
    let namespace = namespace * namespace;
    if cfg.n_cities * cfg.n_pois_per_city > namespace / 2 {
        return Err(CorpusError::Infeasible(format!(
            "{} POIs exceed the name space",
            cfg.n_cities * cfg.n_pois_per_city
        )));
    }
    let mut rng = RngStream::new(cfg.seed).derive(1);
    let mut used: HashSet<String> = HashSet::new();
    let mut entries = Vec::new();
    let mut placed: Vec<(f64, f64)> = Vec::new();
    for _ in 0..cfg.n_cities {
        let name = loop {
            let w = syllable_word(&mut rng, 3);
            if used.insert(w.clone()) {
                break w;
            }
        };
        let mut tries = 0;
        let (lat, lon) = loop {
            let lat = 18.0 + 27.0 * rng.uniform();
            let lon = 98.0 + 27.0 * rng.uniform();
            if placed
                .iter()
                .all(|&(a, b)| (a - lat).abs().max((b - lon).abs()) > 2.0)
            {
                break (lat, lon);
            }
            tries += 1;
            if tries > 10_000 {
                return Err(CorpusError::Infeasible("cannot place cities apart".into()));
            }
        };
        placed.push((lat, lon));
        entries.push(GeoEntry {
            name: name.clone(),
            kind: GeoKind::City,
            lat: round5(lat),
            lon: round5(lon),
            parent_city: None,
        });
        for _ in 0..cfg.n_pois_per_city {
            let prefix = loop {
                let w = syllable_word(&mut rng, 2);
                if used.insert(w.clone()) {
                    break w;
                }
            };
            let poi = format!("{prefix} {}", rng.choose(POI_TYPES));
            let r = 0.35 * rng.uniform().sqrt();
            let theta = std::f64::consts::TAU * rng.uniform();
            entries.push(GeoEntry {
                name: poi,
                kind: GeoKind::Poi,
                lat: round5(lat + r * theta.sin()),
                lon: round5(lon + r * theta.cos()),
                parent_city: Some(name.clone()),
            });
        }
    }
    Gazetteer::new(entries)
}

fn round5(x: f64) -> f64 {
    (x * 1e5).round() / 1e5
}

struct Item {
    id: u64,
    intent: usize,
    /// Indices into the gazetteer entries named in the title.
    geo: Vec<usize>,
    title: String,
}

fn make_item(id: u64, gaz: &Gazetteer, cfg: &SynthConfig, rng: &mut RngStream) -> Item {
    let entries = gaz.entries();
    let cities: Vec<usize> = (0..entries.len())
        .filter(|&i| entries[i].kind == GeoKind::City)
        .collect();
    let pois_of = |c: usize| -> Vec<usize> {
        (0..entries.len())
            .filter(|&i| entries[i].parent_city.as_deref() == Some(entries[c].name.as_str()))
            .collect()
    };
    let intent = rng.below(cfg.n_intents);
    let name = INTENTS[intent][0];
    let n = |i: usize| entries[i].name.as_str();
    let u = rng.uniform();
    let (geo, title) = if u >= ITEM_GEO_SHARE {
        let t = match rng.below(3) {
            0 => format!("{name} special offer with free cancellation"),
            1 => format!("{name} deal for all travelers"),
            _ => format!("classic {name} with instant confirmation"),
        };
        (vec![], t)
    } else if u < ITEM_GEO_SHARE * ITEM_SINGLE_GEO {
        let city = *rng.choose(&cities);
        let pois = pois_of(city);
        if pois.is_empty() || rng.bernoulli(0.4) {
            let t = match rng.below(2) {
                0 => format!("{name} of {} with local guide", n(city)),
                _ => format!("{} {name} best price guaranteed", n(city)),
            };
            (vec![city], t)
        } else {
            let poi = *rng.choose(&pois);
            let t = match rng.below(2) {
                0 => format!("{} {name} instant confirmation", n(poi)),
                _ => format!("{name} near {} with free guide map", n(poi)),
            };
            (vec![poi], t)
        }
    } else {
        let city = *rng.choose(&cities);
        let mut pois = pois_of(city);
        if pois.len() >= 2 && !rng.bernoulli(0.2) {
            rng.shuffle(&mut pois);
            let t = format!(
                "{name} of {} including visiting {} and {}",
                n(city),
                n(pois[0]),
                n(pois[1])
            );
            (vec![city, pois[0], pois[1]], t)
        } else {
            let other = loop {
                let c = *rng.choose(&cities);
                if c != city || cities.len() == 1 {
                    break c;
                }
            };
            let t = format!("{name} from {} to {} across two cities", n(city), n(other));
            let geo = if other == city { vec![city] } else { vec![city, other] };
            (geo, t)
        }
    };
    Item {
        id,
        intent,
        geo,
        title,
    }
}

/// A generated query with its phrase segmentation.
struct DraftQuery {
    phrases: Vec<(Vec<String>, PhraseRole)>,
}

impl DraftQuery {
    fn text(&self) -> String {
        self.phrases
            .iter()
            .flat_map(|(t, _)| t.iter().cloned())
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn spans(&self) -> Vec<PhraseSpan> {
        let mut start = 0;
        self.phrases
            .iter()
            .map(|(t, role)| {
                let s = PhraseSpan {
                    start,
                    end: start + t.len() - 1,
                    role: *role,
                };
                start += t.len();
                s
            })
            .collect()
    }
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Canonical phrase order: intent, city, POI, modifier.
fn draft_query(item: &Item, gaz: &Gazetteer, geo_p: f64, rng: &mut RngStream) -> DraftQuery {
    let entries = gaz.entries();
    let mut phrases = vec![(words(rng.choose(INTENTS[item.intent])), PhraseRole::Intent)];
    if !item.geo.is_empty() && rng.bernoulli(geo_p) {
        let pick = *rng.choose(&item.geo);
        let e = &entries[pick];
        match (&e.parent_city, rng.bernoulli(0.3)) {
            (Some(city), true) => {
                phrases.push((words(city), PhraseRole::Geo));
                phrases.push((words(&e.name), PhraseRole::Geo));
            }
            _ => phrases.push((words(&e.name), PhraseRole::Geo)),
        }
    }
    if rng.bernoulli(0.3) {
        phrases.push((words(rng.choose(MODIFIERS)), PhraseRole::Intent));
    }
    DraftQuery { phrases }
}

/// Swap two adjacent tokens inside one multi-token phrase, if any exists.
fn transpose(draft: &DraftQuery, rng: &mut RngStream) -> Option<String> {
    let spans = draft.spans();
    let eligible: Vec<&PhraseSpan> = spans.iter().filter(|s| s.len() >= 2).collect();
    if eligible.is_empty() {
        return None;
    }
    let s = rng.choose(&eligible);
    let i = s.start + rng.below(s.len() - 1);
    let mut toks = words(&draft.text());
    if toks[i] == toks[i + 1] {
        return None;
    }
    toks.swap(i, i + 1);
    Some(toks.join(" "))
}

fn group_sizes_feasible(r: usize, lo: usize, hi: usize) -> bool {
    r == 0 || r.div_ceil(hi) * lo <= r
}

/// Generates exactly `cfg.n_pairs` pairs. Every item gets between
/// `queries_per_item_min` and `queries_per_item_max` distinct queries; pairs
/// are returned in shuffled order.
pub fn synthesize_corpus(
    cfg: &SynthConfig,
    gaz: &Gazetteer,
) -> Result<Vec<QueryClickPair>, CorpusError> {
    cfg.validate()?;
    if gaz.is_empty() || gaz.cities().next().is_none() {
        return Err(CorpusError::EmptyGazetteer);
    }
    let (lo, hi) = (cfg.queries_per_item_min, cfg.queries_per_item_max);
    if !group_sizes_feasible(cfg.n_pairs, lo, hi) {
        return Err(CorpusError::Infeasible(format!(
            "{} pairs cannot be split into groups of {lo}..={hi}",
            cfg.n_pairs
        )));
    }
    let mut rng = RngStream::new(cfg.seed).derive(2);
    let geo_p = cfg.geo_query_rate / ITEM_GEO_SHARE;
    let mut pairs = Vec::with_capacity(cfg.n_pairs);
    let mut remaining = cfg.n_pairs;
    let mut next_id = 0u64;
    while remaining > 0 {
        let allowed: Vec<usize> = (lo..=hi.min(remaining))
            .filter(|&k| group_sizes_feasible(remaining - k, lo, hi))
            .collect();
        let k = *rng.choose(&allowed);
        let item = make_item(next_id, gaz, cfg, &mut rng);
        next_id += 1;
        let mut seen = HashSet::new();
        let mut attempts = 0;
        while seen.len() < k {
            attempts += 1;
            if attempts > 10_000 {
                return Err(CorpusError::Infeasible(format!(
                    "cannot draw {k} distinct queries for item {}",
                    item.id
                )));
            }
            let draft = draft_query(&item, gaz, geo_p, &mut rng);
            let mut query = draft.text();
            let mut clean_query = None;
            if rng.bernoulli(cfg.misinput_rate) {
                match transpose(&draft, &mut rng) {
                    Some(t) => {
                        clean_query = Some(query);
                        query = t;
                    }
                    // Redraw until a transposable query comes up so the
                    // misinput fraction stays at the configured rate.
                    None => continue,
                }
            }
            if !seen.insert(query.clone()) {
                continue;
            }
            pairs.push(QueryClickPair {
                item_id: item.id,
                query,
                item_title: item.title.clone(),
                uv_c: 1 + rng.geometric(0.3),
                uv_p: rng.geometric(0.7),
                query_phrases: draft.spans(),
                item_geo_entities: item.geo.iter().map(|&g| gaz.entries()[g].name.clone()).collect(),
                clean_query,
            });
        }
        remaining -= k;
    }
    rng.shuffle(&mut pairs);
    Ok(pairs)
}
