//! Corpus ingestion: tokenization, vocabulary construction, group filtering,
//! and batch assembly.
//!
//! Input is JSON Lines with one review group per line:
//! `{"group_id": "...", "reviews": [{"review_id": "...", "text": "..."}]}`.
//! Groups are the unit of everything downstream: filtering, batching, and
//! summarization all operate on whole groups.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus yields zero tokens; cannot build a vocabulary")]
    EmptyVocabulary,
    #[error("vocabulary file is invalid: {0}")]
    BadVocabulary(String),
    #[error("group {group_id:?} has {found} reviews but batching needs {need}")]
    GroupTooSmall { group_id: String, found: usize, need: usize },
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lowercases and splits text into word and punctuation tokens.
///
/// Rules: alphanumeric runs form words; a hyphen joins two alphanumerics
/// ("5-star" stays one token); an apostrophe directly followed by an
/// alphanumeric starts a new word token ("it's" becomes "it", "'s"); every
/// other non-whitespace character is its own token. The output re-tokenizes
/// to itself after [`detokenize`], so normalized text round-trips.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let ch = chars[i];
        if ch.is_whitespace() {
            i += 1;
            continue;
        }
        let starts_word = ch.is_alphanumeric()
            || (ch == '\'' && chars.get(i + 1).is_some_and(|c| c.is_alphanumeric()));
        if !starts_word {
            tokens.push(ch.to_string());
            i += 1;
            continue;
        }
        let mut token = String::new();
        if ch == '\'' {
            token.push('\'');
            i += 1;
        }
        while i < chars.len() {
            let c = chars[i];
            let joins = c.is_alphanumeric()
                || (c == '-'
                    && token.chars().last().is_some_and(char::is_alphanumeric)
                    && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric()));
            if !joins {
                break;
            }
            token.push(c);
            i += 1;
        }
        tokens.push(token);
    }
    tokens
}

pub fn detokenize<T: AsRef<str>>(tokens: &[T]) -> String {
    tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

/// The canonical surface form: lowercased, tokens separated by single spaces.
pub fn normalize(text: &str) -> String {
    detokenize(&tokenize(text))
}

/// A raw review as read from or written to disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceReview {
    pub review_id: String,
    pub text: String,
}

/// A raw review group as read from or written to disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceGroup {
    pub group_id: String,
    pub reviews: Vec<SourceReview>,
}

pub fn read_groups_jsonl<R: BufRead>(reader: R) -> Result<Vec<SourceGroup>, CorpusError> {
    let mut groups = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let group = serde_json::from_str(&line)
            .map_err(|source| CorpusError::Parse { line: idx + 1, source })?;
        groups.push(group);
    }
    Ok(groups)
}

pub fn read_groups_file(path: &Path) -> Result<Vec<SourceGroup>, CorpusError> {
    let file = std::fs::File::open(path)?;
    read_groups_jsonl(std::io::BufReader::new(file))
}

pub fn write_groups_jsonl<W: Write>(
    mut writer: W,
    groups: &[SourceGroup],
) -> Result<(), CorpusError> {
    for group in groups {
        serde_json::to_writer(&mut writer, group).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// A tokenized review, before any vocabulary is involved.
#[derive(Debug, Clone, PartialEq)]
pub struct ReviewRecord {
    pub review_id: String,
    pub tokens: Vec<String>,
}

impl ReviewRecord {
    pub fn surface(&self) -> String {
        detokenize(&self.tokens)
    }
}

/// A tokenized review group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRecord {
    pub group_id: String,
    pub reviews: Vec<ReviewRecord>,
}

pub fn tokenize_groups(source: &[SourceGroup]) -> Vec<GroupRecord> {
    source
        .iter()
        .map(|group| GroupRecord {
            group_id: group.group_id.clone(),
            reviews: group
                .reviews
                .iter()
                .map(|review| ReviewRecord {
                    review_id: review.review_id.clone(),
                    tokens: tokenize(&review.text),
                })
                .collect(),
        })
        .collect()
}

/// Converts records back to the on-disk form with normalized surface text.
pub fn to_source_groups(records: &[GroupRecord]) -> Vec<SourceGroup> {
    records
        .iter()
        .map(|group| SourceGroup {
            group_id: group.group_id.clone(),
            reviews: group
                .reviews
                .iter()
                .map(|review| SourceReview {
                    review_id: review.review_id.clone(),
                    text: review.surface(),
                })
                .collect(),
        })
        .collect()
}

/// Token/id maps with the four specials at ids 0..4.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
    max_extended: usize,
}

impl Vocabulary {
    /// Keeps the `size − 4` most frequent tokens after the specials.
    /// Frequency ties break lexicographically. `size` below 4 is a contract
    /// violation; exactly 4 leaves room for the specials only.
    pub fn build<'a, I>(token_seqs: I, size: usize, max_extended: usize) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        assert!(size >= SPECIAL_TOKENS.len(), "vocabulary size must cover the specials");
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for seq in token_seqs {
            for token in seq {
                if !SPECIAL_TOKENS.contains(&token.as_str()) {
                    *counts.entry(token).or_insert(0) += 1;
                }
            }
        }
        if counts.is_empty() {
            return Err(CorpusError::EmptyVocabulary);
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(size - SPECIAL_TOKENS.len());
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(token, _)| token.to_string()))
            .collect();
        Self::from_tokens(tokens, max_extended)
    }

    /// Builds from an explicit id-ordered token list (the persisted form).
    pub fn from_tokens(id_to_token: Vec<String>, max_extended: usize) -> Result<Self, CorpusError> {
        if id_to_token.len() < SPECIAL_TOKENS.len()
            || id_to_token[..SPECIAL_TOKENS.len()] != SPECIAL_TOKENS.map(str::to_string)
        {
            return Err(CorpusError::BadVocabulary(
                "first four entries must be the special tokens".into(),
            ));
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (id, token) in id_to_token.iter().enumerate() {
            if token_to_id.insert(token.clone(), id as u32).is_some() {
                return Err(CorpusError::BadVocabulary(format!("duplicate token {token:?}")));
            }
        }
        Ok(Self { id_to_token, token_to_id, max_extended })
    }

    /// Fixed vocabulary size V, specials included.
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn max_extended(&self) -> usize {
        self.max_extended
    }

    /// Fixed-vocab id, UNK for out-of-vocabulary tokens.
    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// Surface form of a fixed-vocab id; ids ≥ V are a contract violation
    /// (resolve those through the batch OOV table).
    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut out = String::new();
        for token in &self.id_to_token {
            out.push_str(token);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path, max_extended: usize) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path)?;
        let tokens = text.lines().map(str::to_string).collect();
        Self::from_tokens(tokens, max_extended)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FilterOptions {
    pub min_reviews: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub popularity_pct: f64,
}

impl Default for FilterOptions {
    fn default() -> Self {
        Self { min_reviews: 10, min_len: 20, max_len: 70, popularity_pct: 90.0 }
    }
}

/// Nearest-rank percentile: the ⌈p/100·n⌉-th smallest value.
fn nearest_rank_percentile(sorted: &[usize], pct: f64) -> usize {
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Drops too-short and too-long reviews, then undersized groups, then
/// over-popular groups (review count above the `popularity_pct` percentile).
///
/// The percentile is recomputed over the survivors after each removal round
/// until no group is dropped, so the whole operation is idempotent: the
/// output is a fixed point of the popularity cut.
pub fn filter_groups(groups: Vec<GroupRecord>, opts: &FilterOptions) -> Vec<GroupRecord> {
    assert!(opts.min_len > 0 && opts.min_len <= opts.max_len, "bad length bounds");
    assert!(
        opts.popularity_pct > 0.0 && opts.popularity_pct <= 100.0,
        "popularity percentile out of range"
    );
    let mut survivors: Vec<GroupRecord> = groups
        .into_iter()
        .map(|mut group| {
            group
                .reviews
                .retain(|review| (opts.min_len..=opts.max_len).contains(&review.tokens.len()));
            group
        })
        .filter(|group| group.reviews.len() >= opts.min_reviews)
        .collect();
    loop {
        if survivors.is_empty() {
            return survivors;
        }
        let mut counts: Vec<usize> = survivors.iter().map(|g| g.reviews.len()).collect();
        counts.sort_unstable();
        let cutoff = nearest_rank_percentile(&counts, opts.popularity_pct);
        let before = survivors.len();
        survivors.retain(|group| group.reviews.len() <= cutoff);
        if survivors.len() == before {
            return survivors;
        }
    }
}

/// A batched review: surface tokens plus fixed-vocab and extended ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Review {
    pub review_id: String,
    pub surface_text: String,
    pub tokens: Vec<String>,
    pub token_ids: Vec<u32>,
    pub extended_ids: Vec<u32>,
}

impl Review {
    /// Token count T.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReviewGroup {
    pub group_id: String,
    pub reviews: Vec<Review>,
}

impl ReviewGroup {
    /// Review count N.
    pub fn len(&self) -> usize {
        self.reviews.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reviews.is_empty()
    }
}

/// Batch-local ids for out-of-vocabulary tokens, assigned densely from V.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OovTable {
    base: u32,
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl OovTable {
    fn new(base: u32) -> Self {
        Self { base, tokens: Vec::new(), ids: HashMap::new() }
    }

    fn intern(&mut self, token: &str, cap: usize) -> Option<u32> {
        if let Some(&id) = self.ids.get(token) {
            return Some(id);
        }
        if self.tokens.len() >= cap {
            return None;
        }
        let id = self.base + self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        Some(id)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Surface form for an extended id ≥ V.
    pub fn resolve(&self, id: u32) -> Option<&str> {
        id.checked_sub(self.base).and_then(|off| self.tokens.get(off as usize)).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }
}

/// One or more review groups ready for the model, with per-group OOV tables.
#[derive(Debug, Clone)]
pub struct Batch {
    pub groups: Vec<ReviewGroup>,
    pub oov_tables: Vec<OovTable>,
    /// Longest review length in the batch; the padding target.
    pub padded_len: usize,
}

impl Batch {
    /// True exactly at padded positions of the given review.
    pub fn padding_mask(&self, group: usize, review: usize) -> Vec<bool> {
        let len = self.groups[group].reviews[review].len();
        (0..self.padded_len).map(|t| t >= len).collect()
    }
}

fn batch_review(record: &ReviewRecord, vocab: &Vocabulary, oov: &mut OovTable) -> Review {
    let token_ids: Vec<u32> = record.tokens.iter().map(|t| vocab.id(t)).collect();
    let extended_ids = record
        .tokens
        .iter()
        .zip(&token_ids)
        .map(|(token, &id)| {
            if id == UNK && !vocab.contains(token) {
                oov.intern(token, vocab.max_extended()).unwrap_or(UNK)
            } else {
                id
            }
        })
        .collect();
    Review {
        review_id: record.review_id.clone(),
        surface_text: record.surface(),
        tokens: record.tokens.clone(),
        token_ids,
        extended_ids,
    }
}

/// Samples `group_size` reviews per group (seeded, without replacement),
/// shuffles group order, and assigns batch-local OOV ids. One group per
/// batch; reviews keep their original relative order.
pub fn make_batches(
    groups: &[GroupRecord],
    vocab: &Vocabulary,
    group_size: usize,
    seed: u64,
) -> Result<Vec<Batch>, CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..groups.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let mut batches = Vec::with_capacity(groups.len());
    for group_idx in order {
        let group = &groups[group_idx];
        if group.reviews.len() < group_size {
            return Err(CorpusError::GroupTooSmall {
                group_id: group.group_id.clone(),
                found: group.reviews.len(),
                need: group_size,
            });
        }
        let mut picked = rand::seq::index::sample(&mut rng, group.reviews.len(), group_size)
            .into_vec();
        picked.sort_unstable();
        let mut oov = OovTable::new(vocab.size() as u32);
        let reviews: Vec<Review> =
            picked.iter().map(|&i| batch_review(&group.reviews[i], vocab, &mut oov)).collect();
        let padded_len = reviews.iter().map(Review::len).max().unwrap_or(0);
        batches.push(Batch {
            groups: vec![ReviewGroup { group_id: group.group_id.clone(), reviews }],
            oov_tables: vec![oov],
            padded_len,
        });
    }
    Ok(batches)
}

/// Batches a whole group without sampling, for generation and evaluation.
pub fn make_eval_group(record: &GroupRecord, vocab: &Vocabulary) -> (ReviewGroup, OovTable) {
    let mut oov = OovTable::new(vocab.size() as u32);
    let reviews =
        record.reviews.iter().map(|review| batch_review(review, vocab, &mut oov)).collect();
    (ReviewGroup { group_id: record.group_id.clone(), reviews }, oov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_examples() {
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("Great price!"), vec!["great", "price", "!"]);
        assert_eq!(tokenize("it's 5-star"), vec!["it", "'s", "5-star"]);
        assert_eq!(tokenize("don't stop"), vec!["don", "'t", "stop"]);
        assert_eq!(tokenize("well -lit"), vec!["well", "-", "lit"]);
        assert_eq!(tokenize("'quoted'"), vec!["'quoted", "'"]);
        assert_eq!(tokenize("café!!"), vec!["café", "!", "!"]);
        assert_eq!(tokenize("a--b"), vec!["a", "-", "-", "b"]);
    }

    #[test]
    fn normalize_is_stable() {
        let text = "It's a GREAT, well-lit place... really!";
        let once = normalize(text);
        assert_eq!(normalize(&once), once);
        assert_eq!(tokenize(&once), tokenize(text));
    }

    proptest! {
        #[test]
        fn tokenize_round_trips(text in "\\PC{0,60}") {
            let tokens = tokenize(&text);
            prop_assert_eq!(tokenize(&detokenize(&tokens)), tokens);
        }
    }

    fn record(group_id: &str, texts: &[&str]) -> GroupRecord {
        GroupRecord {
            group_id: group_id.into(),
            reviews: texts
                .iter()
                .enumerate()
                .map(|(i, text)| ReviewRecord {
                    review_id: format!("{group_id}-{i}"),
                    tokens: tokenize(text),
                })
                .collect(),
        }
    }

    #[test]
    fn vocabulary_frequency_and_ties() {
        let seqs = [tokenize("a a b")];
        let refs: Vec<&[String]> = seqs.iter().map(Vec::as_slice).collect();
        let vocab = Vocabulary::build(refs.iter().copied(), 6, 10).unwrap();
        assert_eq!(vocab.size(), 6);
        assert_eq!(vocab.id("a"), 4);
        assert_eq!(vocab.id("b"), 5);

        let seqs = [tokenize("a a b b")];
        let refs: Vec<&[String]> = seqs.iter().map(Vec::as_slice).collect();
        let vocab = Vocabulary::build(refs.iter().copied(), 5, 10).unwrap();
        assert_eq!(vocab.size(), 5);
        assert_eq!(vocab.id("a"), 4);
        assert_eq!(vocab.id("b"), UNK);

        let vocab = Vocabulary::build(refs.iter().copied(), 4, 10).unwrap();
        assert_eq!(vocab.size(), 4);
        assert_eq!(vocab.id("a"), UNK);
        assert_eq!(vocab.id("b"), UNK);

        let empty: Vec<&[String]> = vec![];
        assert!(Vocabulary::build(empty, 10, 10).is_err());
    }

    #[test]
    fn vocabulary_round_trips_through_file() {
        let seqs = [tokenize("x y z x")];
        let refs: Vec<&[String]> = seqs.iter().map(Vec::as_slice).collect();
        let vocab = Vocabulary::build(refs.iter().copied(), 8, 5).unwrap();
        let dir = std::env::temp_dir().join("copycat-vocab-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vocab.txt");
        vocab.save(&path).unwrap();
        let loaded = Vocabulary::load(&path, 5).unwrap();
        assert_eq!(loaded.tokens(), vocab.tokens());
        assert_eq!(loaded.id("x"), vocab.id("x"));
    }

    fn sized_group(group_id: &str, reviews: usize, tokens_each: usize) -> GroupRecord {
        GroupRecord {
            group_id: group_id.into(),
            reviews: (0..reviews)
                .map(|i| ReviewRecord {
                    review_id: format!("{group_id}-{i}"),
                    tokens: (0..tokens_each).map(|t| format!("w{t}")).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn filter_length_and_size_rules() {
        let opts =
            FilterOptions { min_reviews: 10, min_len: 20, max_len: 70, popularity_pct: 90.0 };
        // A 19-token review is removed, leaving 9 reviews, so the whole
        // group goes.
        let mut group = sized_group("g", 10, 20);
        group.reviews[0].tokens.truncate(19);
        assert!(filter_groups(vec![group], &opts).is_empty());

        let kept = filter_groups(vec![sized_group("g", 10, 20)], &opts);
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn filter_popularity_percentile() {
        let opts = FilterOptions { min_reviews: 1, min_len: 1, max_len: 100, popularity_pct: 90.0 };
        let groups: Vec<GroupRecord> =
            (10..=19).map(|n| sized_group(&format!("g{n}"), n, 5)).collect();
        let kept = filter_groups(groups, &opts);
        let counts: Vec<usize> = kept.iter().map(|g| g.reviews.len()).collect();
        assert_eq!(counts, (10..=18).collect::<Vec<_>>());
    }

    #[test]
    fn filter_is_idempotent_even_when_the_cut_cascades() {
        let opts = FilterOptions { min_reviews: 1, min_len: 1, max_len: 100, popularity_pct: 90.0 };
        let groups: Vec<GroupRecord> =
            (1..=20).map(|n| sized_group(&format!("g{n}"), n, 3)).collect();
        let once = filter_groups(groups, &opts);
        let twice = filter_groups(once.clone(), &opts);
        assert_eq!(once, twice);
        assert!(!once.is_empty());
    }

    proptest! {
        #[test]
        fn filter_is_idempotent(sizes in proptest::collection::vec(1usize..30, 1..25)) {
            let opts = FilterOptions {
                min_reviews: 2, min_len: 1, max_len: 100, popularity_pct: 90.0,
            };
            let groups: Vec<GroupRecord> = sizes
                .iter()
                .enumerate()
                .map(|(i, &n)| sized_group(&format!("g{i}"), n, 4))
                .collect();
            let once = filter_groups(groups, &opts);
            let twice = filter_groups(once.clone(), &opts);
            prop_assert_eq!(once, twice);
        }
    }

    fn tiny_vocab() -> Vocabulary {
        let seqs = [tokenize("good food and nice staff here")];
        let refs: Vec<&[String]> = seqs.iter().map(Vec::as_slice).collect();
        Vocabulary::build(refs.iter().copied(), 10, 2).unwrap()
    }

    #[test]
    fn batches_are_reproducible_and_cover_full_groups() {
        let vocab = tiny_vocab();
        let groups = vec![
            record("a", &["good food here", "nice staff here", "good staff", "nice food"]),
            record("b", &["food good", "staff nice", "here and", "good nice"]),
        ];
        let first = make_batches(&groups, &vocab, 4, 7).unwrap();
        let second = make_batches(&groups, &vocab, 4, 7).unwrap();
        assert_eq!(first.len(), 2);
        for (x, y) in first.iter().zip(&second) {
            assert_eq!(x.groups[0].group_id, y.groups[0].group_id);
            assert_eq!(x.groups[0].reviews, y.groups[0].reviews);
        }
        // group_size equals the group size: every review id appears.
        let ids: Vec<&str> =
            first.iter().flat_map(|b| &b.groups[0].reviews).map(|r| r.review_id.as_str()).collect();
        assert_eq!(ids.len(), 8);
    }

    #[test]
    fn oov_ids_are_dense_and_capped() {
        let vocab = tiny_vocab();
        let v = vocab.size() as u32;
        let groups = vec![record("g", &["zoomtron good", "zoomtron blarp", "blarp quux"])];
        let batches = make_batches(&groups, &vocab, 3, 0).unwrap();
        let batch = &batches[0];
        let oov = &batch.oov_tables[0];
        // max_extended = 2: third novel token overflows to UNK.
        assert_eq!(oov.len(), 2);
        assert_eq!(oov.id_of("zoomtron"), Some(v));
        assert_eq!(oov.resolve(v), Some("zoomtron"));
        let all_ext: Vec<u32> = batch.groups[0]
            .reviews
            .iter()
            .flat_map(|r| r.extended_ids.iter().copied())
            .collect();
        assert!(all_ext.contains(&v));
        assert!(all_ext.contains(&(v + 1)));
        assert!(all_ext.iter().all(|&id| id < v + 2 || id == UNK));
        let quux_ext = &batch.groups[0].reviews[2].extended_ids;
        assert!(quux_ext.contains(&UNK));
    }

    #[test]
    fn padding_mask_marks_exactly_the_padding() {
        let vocab = tiny_vocab();
        let groups = vec![record("g", &["good food here and", "nice staff"])];
        let batches = make_batches(&groups, &vocab, 2, 0).unwrap();
        let batch = &batches[0];
        assert_eq!(batch.padded_len, 4);
        let lens: Vec<usize> = batch.groups[0].reviews.iter().map(Review::len).collect();
        for (i, &len) in lens.iter().enumerate() {
            let mask = batch.padding_mask(0, i);
            assert_eq!(mask.len(), 4);
            for (t, &padded) in mask.iter().enumerate() {
                assert_eq!(padded, t >= len);
            }
        }
    }

    #[test]
    fn undersized_group_is_rejected() {
        let vocab = tiny_vocab();
        let groups = vec![record("g", &["good food"])];
        assert!(matches!(
            make_batches(&groups, &vocab, 2, 0),
            Err(CorpusError::GroupTooSmall { .. })
        ));
    }

    #[test]
    fn eval_group_keeps_order_and_resolves_every_id() {
        let vocab = tiny_vocab();
        let group = record("g", &["zoomtron good food", "nice zoomtron staff"]);
        let (batched, oov) = make_eval_group(&group, &vocab);
        assert_eq!(batched.reviews.len(), 2);
        assert_eq!(batched.reviews[0].review_id, "g-0");
        for review in &batched.reviews {
            assert_eq!(review.tokens.len(), review.token_ids.len());
            assert_eq!(review.tokens.len(), review.extended_ids.len());
            for &id in &review.extended_ids {
                assert!((id as usize) < vocab.size() || oov.resolve(id).is_some());
            }
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let groups = vec![SourceGroup {
            group_id: "g1".into(),
            reviews: vec![SourceReview { review_id: "r1".into(), text: "Nice place!".into() }],
        }];
        let mut buf = Vec::new();
        write_groups_jsonl(&mut buf, &groups).unwrap();
        let back = read_groups_jsonl(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].group_id, "g1");
        assert_eq!(back[0].reviews[0].text, "Nice place!");
        assert!(read_groups_jsonl(std::io::Cursor::new(b"{bad json}\n")).is_err());
    }
}
