//! Vocabulary, whitespace tokenization and gazetteer phrase matching.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const UNK: &str = "[UNK]";

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const MASK_ID: u32 = 3;
pub const UNK_ID: u32 = 4;
pub const NUM_SPECIAL: usize = 5;

const SPECIALS: [&str; NUM_SPECIAL] = [PAD, CLS, SEP, MASK, UNK];

pub fn is_special(id: u32) -> bool {
    (id as usize) < NUM_SPECIAL
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    /// Every whitespace token in `texts`, most frequent first, ties broken
    /// lexicographically, after the five fixed special ids.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for tok in text.split_whitespace() {
                if !SPECIALS.contains(&tok) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(UNK)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> io::Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s)
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < NUM_SPECIAL || tokens[..NUM_SPECIAL] != SPECIALS {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "vocab file must start with the five special tokens",
            ));
        }
        let unique: HashSet<&String> = tokens.iter().collect();
        if unique.len() != tokens.len() {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "duplicate vocab token"));
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Inclusive token span `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl From<[usize; 2]> for Span {
    fn from(v: [usize; 2]) -> Self {
        Span {
            start: v[0],
            end: v[1],
        }
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

impl Span {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhraseRole {
    Geo,
    Intent,
}

/// Query phrase `[start, end, role]` with an inclusive end.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize, PhraseRole)", into = "(usize, usize, PhraseRole)")]
pub struct PhraseSpan {
    pub start: usize,
    pub end: usize,
    pub role: PhraseRole,
}

impl From<(usize, usize, PhraseRole)> for PhraseSpan {
    fn from((start, end, role): (usize, usize, PhraseRole)) -> Self {
        Self { start, end, role }
    }
}

impl From<PhraseSpan> for (usize, usize, PhraseRole) {
    fn from(p: PhraseSpan) -> Self {
        (p.start, p.end, p.role)
    }
}

impl PhraseSpan {
    pub fn span(&self) -> Span {
        Span {
            start: self.start,
            end: self.end,
        }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedText {
    pub tokens: Vec<String>,
    pub ids: Vec<u32>,
    pub geo_spans: Vec<Span>,
    pub phrase_spans: Vec<PhraseSpan>,
}

/// Whitespace split; unknown tokens map to `[UNK]`. No specials are added.
pub fn tokenize(text: &str, vocab: &Vocab) -> TokenizedText {
    let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
    let ids = tokens.iter().map(|t| vocab.id(t)).collect();
    TokenizedText {
        tokens,
        ids,
        geo_spans: Vec::new(),
        phrase_spans: Vec::new(),
    }
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Exact whole-token matcher over gazetteer names.
#[derive(Clone, Debug, Default)]
pub struct GeoMatcher {
    names: HashSet<Vec<String>>,
    max_len: usize,
}

impl GeoMatcher {
    pub fn new<'a>(names: impl IntoIterator<Item = &'a str>) -> Self {
        let mut m = Self::default();
        for name in names {
            let toks: Vec<String> = name.split_whitespace().map(str::to_string).collect();
            if !toks.is_empty() {
                m.max_len = m.max_len.max(toks.len());
                m.names.insert(toks);
            }
        }
        m
    }

    pub fn contains(&self, tokens: &[String]) -> bool {
        self.names.contains(tokens)
    }
}

/// Gazetteer matches in `tokens`. Among overlapping candidates the longer
/// one wins, then the leftmost. Output is sorted and disjoint.
pub fn detect_geo_phrases(tokens: &[String], matcher: &GeoMatcher) -> Vec<Span> {
    let mut candidates = Vec::new();
    for start in 0..tokens.len() {
        for len in 1..=matcher.max_len.min(tokens.len() - start) {
            if matcher.contains(&tokens[start..start + len]) {
                candidates.push(Span {
                    start,
                    end: start + len - 1,
                });
            }
        }
    }
    candidates.sort_by(|a, b| b.len().cmp(&a.len()).then(a.start.cmp(&b.start)));
    let mut taken = vec![false; tokens.len()];
    let mut chosen = Vec::new();
    for c in candidates {
        if (c.start..=c.end).any(|i| taken[i]) {
            continue;
        }
        (c.start..=c.end).for_each(|i| taken[i] = true);
        chosen.push(c);
    }
    chosen.sort_by_key(|s| s.start);
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn vocab_frequency_order() {
        let v = Vocab::build(["a b", "a"]);
        assert_eq!(&v.tokens()[..NUM_SPECIAL], &SPECIALS);
        assert_eq!(&v.tokens()[NUM_SPECIAL..], &["a", "b"]);
        assert_eq!(Vocab::build(["a b", "a", ""]), v);
        assert_eq!(Vocab::build(["a b", "a"]), v);
    }

    #[test]
    fn vocab_ties_are_lexicographic() {
        let v = Vocab::build(["z y x"]);
        assert_eq!(&v.tokens()[NUM_SPECIAL..], &["x", "y", "z"]);
    }

    #[test]
    fn tokenize_examples() {
        let v = Vocab::build(["package tour Hangzhou"]);
        let t = tokenize("package tour Hangzhou", &v);
        assert_eq!(t.tokens, toks("package tour Hangzhou"));
        assert!(tokenize("", &v).tokens.is_empty());
        let fresh = Vocab::build(Vec::<&str>::new());
        assert_eq!(tokenize("zzz-unknown", &fresh).ids, vec![UNK_ID]);
    }

    #[test]
    fn geo_phrase_in_query() {
        let m = GeoMatcher::new(["West Lake"]);
        let spans = detect_geo_phrases(&toks("one-day tour of West Lake"), &m);
        assert_eq!(spans, vec![Span { start: 3, end: 4 }]);
        assert!(detect_geo_phrases(&toks("package tour"), &m).is_empty());
    }

    #[test]
    fn longest_match_wins() {
        let m = GeoMatcher::new(["West", "West Lake"]);
        assert_eq!(
            detect_geo_phrases(&toks("West Lake"), &m),
            vec![Span { start: 0, end: 1 }]
        );
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::build(["tour of West Lake", "tour"]);
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
    }

    proptest! {
        #[test]
        fn tokenize_detokenize_identity(words in prop::collection::vec("[a-z]{1,6}", 0..8), seps in prop::collection::vec(" {1,3}", 0..9)) {
            let mut text = String::new();
            for (i, w) in words.iter().enumerate() {
                text.push_str(seps.get(i).map(String::as_str).unwrap_or(" "));
                text.push_str(w);
            }
            let v = Vocab::build([text.as_str()]);
            let t = tokenize(&text, &v);
            prop_assert_eq!(detokenize(&t.tokens), words.join(" "));
            for (tok, id) in t.tokens.iter().zip(&t.ids) {
                prop_assert_eq!(v.token(*id), tok.as_str());
            }
        }

        #[test]
        fn geo_spans_sorted_disjoint_verbatim(seq in prop::collection::vec(0usize..4, 0..12)) {
            let words = ["West", "Lake", "Park", "tour"];
            let tokens: Vec<String> = seq.iter().map(|&i| words[i].to_string()).collect();
            let names = ["West", "West Lake", "Lake Park", "Park"];
            let m = GeoMatcher::new(names);
            let spans = detect_geo_phrases(&tokens, &m);
            for w in spans.windows(2) {
                prop_assert!(w[0].end < w[1].start);
            }
            for s in &spans {
                let text = tokens[s.start..=s.end].join(" ");
                prop_assert!(names.contains(&text.as_str()));
            }
        }
    }
}
