//! Cleaning and windowing rules plus the token vocabulary.
//!
//! The preparation path is: segment long sequences into fixed-length chunks,
//! drop consecutive duplicate `(action, item)` pairs, then window each chunk
//! into one training example — up to 22 history events followed by exactly 4
//! target events, requiring at least 10 events overall.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{ItemSnapshot, UserSequence};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
const RESERVED: u32 = 3;

/// Minimum event count for a sequence to yield an example.
pub const MIN_SEQUENCE_EVENTS: usize = 10;
/// Longest history fed to the user encoder.
pub const MAX_HISTORY: usize = 22;
/// Number of future interactions predicted.
pub const TARGET_STEPS: usize = 4;
/// Window taken from the tail of a sequence: history plus targets.
pub const WINDOW: usize = MAX_HISTORY + TARGET_STEPS;

pub const DEFAULT_VOCAB_LIMIT: usize = 32_768;
pub const DEFAULT_MAX_TOKENS: usize = 32;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt examples file: {0}")]
    CorruptFile(String),
}

/// Which content fields feed the item representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureConfig {
    TitleBrandCategory,
    TitleOnly,
    BrandCategory,
}

impl FeatureConfig {
    pub fn as_str(&self) -> &'static str {
        match self {
            FeatureConfig::TitleBrandCategory => "title_brand_category",
            FeatureConfig::TitleOnly => "title_only",
            FeatureConfig::BrandCategory => "brand_category",
        }
    }
}

impl std::str::FromStr for FeatureConfig {
    type Err = PreprocessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "title_brand_category" => Ok(FeatureConfig::TitleBrandCategory),
            "title_only" | "title" => Ok(FeatureConfig::TitleOnly),
            "brand_category" => Ok(FeatureConfig::BrandCategory),
            other => Err(PreprocessError::InvalidArg(format!(
                "unknown feature config '{other}'"
            ))),
        }
    }
}

/// Token table with reserved ids PAD=0, UNK=1, BOS=2 and dense ids above.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    pub feature_config: FeatureConfig,
    pub limit: usize,
    token_ids: BTreeMap<String, u32>,
}

impl Vocab {
    /// Total id space including the three reserved ids.
    pub fn size(&self) -> usize {
        RESERVED as usize + self.token_ids.len()
    }

    pub fn id_of(&self, token: &str) -> u32 {
        self.token_ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_ids.contains_key(token)
    }
}

/// An item's content rendered as token ids under a feature configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedItem {
    pub token_ids: Vec<u32>,
    pub feature_config: FeatureConfig,
}

/// One target interaction: tokens for the item tower plus the identifiers
/// the three-granularity evaluation matches on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetItem {
    pub tokens: TokenizedItem,
    pub item_id: String,
    pub brand_id: i64,
    pub c2_id: i64,
}

/// One prepared window: 6–22 history events and exactly 4 targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbrExample {
    pub history: Vec<TokenizedItem>,
    pub targets: Vec<TargetItem>,
}

/// Drops event `i` when its `(event_type, item_id)` equals event `i-1`'s.
pub fn dedup_consecutive(seq: &UserSequence) -> UserSequence {
    let mut events = Vec::with_capacity(seq.events.len());
    for event in &seq.events {
        let dup = events.last().map_or(false, |prev: &crate::datamodel::EventRecord| {
            prev.event_type == event.event_type && prev.item.item_id == event.item.item_id
        });
        if !dup {
            events.push(event.clone());
        }
    }
    UserSequence {
        user_id: seq.user_id.clone(),
        sequence_id: seq.sequence_id.clone(),
        events,
    }
}

/// Splits into contiguous chunks of `max_len` events (last chunk may be
/// shorter). Chunks past the first get a `:<k>` suffix on the sequence id so
/// they remain distinct sequences.
pub fn segment_sequence(
    seq: &UserSequence,
    max_len: usize,
) -> Result<Vec<UserSequence>, PreprocessError> {
    if max_len == 0 {
        return Err(PreprocessError::InvalidArg("max_len must be >= 1".into()));
    }
    Ok(seq
        .events
        .chunks(max_len)
        .enumerate()
        .map(|(k, chunk)| UserSequence {
            user_id: seq.user_id.clone(),
            sequence_id: if k == 0 {
                seq.sequence_id.clone()
            } else {
                format!("{}:{}", seq.sequence_id, k)
            },
            events: chunk.to_vec(),
        })
        .collect())
}

/// Windows a deduplicated sequence into one example: `None` if it has fewer
/// than 10 events, otherwise the last `min(len, 26)` events with the final 4
/// as targets and the preceding 6–22 as history.
///
/// Target events must carry `brand_id` and `c2_id` (guaranteed for events
/// that came through `parse_event_line`).
pub fn make_sbr_example(
    seq: &UserSequence,
    vocab: &Vocab,
    max_tokens: usize,
) -> Option<SbrExample> {
    let n = seq.events.len();
    if n < MIN_SEQUENCE_EVENTS {
        return None;
    }
    let window = &seq.events[n.saturating_sub(WINDOW)..];
    let split = window.len() - TARGET_STEPS;
    let history = window[..split]
        .iter()
        .map(|e| tokenize_item(&e.item, vocab, max_tokens))
        .collect();
    let targets = window[split..]
        .iter()
        .map(|e| TargetItem {
            tokens: tokenize_item(&e.item, vocab, max_tokens),
            item_id: e.item.item_id.clone(),
            brand_id: e
                .item
                .brand_id
                .expect("target item missing brand_id; events must come from parse_event_line"),
            c2_id: e
                .item
                .c2_id
                .expect("target item missing c2_id; events must come from parse_event_line"),
        })
        .collect();
    Some(SbrExample { history, targets })
}

/// Lowercases and splits on any non-alphanumeric character.
pub fn tokenize_text(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

fn item_tokens(item: &ItemSnapshot, feature_config: FeatureConfig) -> Vec<String> {
    let mut tokens = Vec::new();
    match feature_config {
        FeatureConfig::TitleBrandCategory => {
            tokens.extend(tokenize_text(&item.name));
            tokens.extend(tokenize_text(&item.brand_name));
            tokens.extend(tokenize_text(&item.c0_name));
            tokens.extend(tokenize_text(&item.c1_name));
            tokens.extend(tokenize_text(&item.c2_name));
        }
        FeatureConfig::TitleOnly => {
            tokens.extend(tokenize_text(&item.name));
        }
        FeatureConfig::BrandCategory => {
            tokens.extend(tokenize_text(&item.brand_name));
            tokens.extend(tokenize_text(&item.c0_name));
            tokens.extend(tokenize_text(&item.c1_name));
            tokens.extend(tokenize_text(&item.c2_name));
        }
    }
    tokens
}

/// Builds the token table: top `limit - 3` tokens by frequency from the
/// fields selected by `feature_config`, frequency ties broken by token text
/// ascending; ids assigned densely after the reserved ids.
pub fn build_vocab(
    items: &[ItemSnapshot],
    feature_config: FeatureConfig,
    limit: usize,
) -> Result<Vocab, PreprocessError> {
    if limit <= RESERVED as usize {
        return Err(PreprocessError::InvalidArg(format!(
            "vocab limit {limit} must exceed the {RESERVED} reserved ids"
        )));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for item in items {
        for token in item_tokens(item, feature_config) {
            *counts.entry(token).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(limit - RESERVED as usize);

    let token_ids = ranked
        .into_iter()
        .enumerate()
        .map(|(i, (token, _))| (token, RESERVED + i as u32))
        .collect();
    Ok(Vocab {
        feature_config,
        limit,
        token_ids,
    })
}

/// Maps an item to token ids under the vocab's feature configuration:
/// out-of-vocabulary tokens become UNK, the list is truncated to
/// `max_tokens`, and an item with no tokens yields `[UNK]`.
pub fn tokenize_item(item: &ItemSnapshot, vocab: &Vocab, max_tokens: usize) -> TokenizedItem {
    let mut token_ids: Vec<u32> = item_tokens(item, vocab.feature_config)
        .iter()
        .take(max_tokens.max(1))
        .map(|t| vocab.id_of(t))
        .collect();
    if token_ids.is_empty() {
        token_ids.push(UNK_ID);
    }
    TokenizedItem {
        token_ids,
        feature_config: vocab.feature_config,
    }
}

/// Full preparation for a set of reconstructed sequences: segment (when
/// `segment_len` is set), dedup, window. Order of outputs follows the input.
pub fn prepare_examples(
    sequences: &[UserSequence],
    vocab: &Vocab,
    segment_len: Option<usize>,
    max_tokens: usize,
) -> Result<Vec<SbrExample>, PreprocessError> {
    let mut examples = Vec::new();
    for seq in sequences {
        let chunks = match segment_len {
            Some(len) => segment_sequence(seq, len)?,
            None => vec![seq.clone()],
        };
        for chunk in &chunks {
            let deduped = dedup_consecutive(chunk);
            if let Some(example) = make_sbr_example(&deduped, vocab, max_tokens) {
                examples.push(example);
            }
        }
    }
    Ok(examples)
}

// ---------------------------------------------------------------------------
// vocab.json and examples.bin formats
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    feature_config: FeatureConfig,
    limit: usize,
    tokens: BTreeMap<String, u32>,
}

pub fn save_vocab(vocab: &Vocab, path: &Path) -> Result<(), PreprocessError> {
    let file = VocabFile {
        version: 1,
        feature_config: vocab.feature_config,
        limit: vocab.limit,
        tokens: vocab.token_ids.clone(),
    };
    let mut out = serde_json::to_string_pretty(&file).expect("vocab serializes");
    out.push('\n');
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_vocab(path: &Path) -> Result<Vocab, PreprocessError> {
    let text = std::fs::read_to_string(path)?;
    let file: VocabFile = serde_json::from_str(&text)
        .map_err(|e| PreprocessError::CorruptFile(format!("vocab json: {e}")))?;
    Ok(Vocab {
        feature_config: file.feature_config,
        limit: file.limit,
        token_ids: file.tokens,
    })
}

/// Converts a vocab to/from its plain JSON value (used to embed the vocab in
/// model checkpoints).
pub fn vocab_to_json(vocab: &Vocab) -> serde_json::Value {
    serde_json::json!({
        "version": 1,
        "feature_config": vocab.feature_config,
        "limit": vocab.limit,
        "tokens": vocab.token_ids,
    })
}

pub fn vocab_from_json(value: &serde_json::Value) -> Result<Vocab, PreprocessError> {
    let file: VocabFile = serde_json::from_value(value.clone())
        .map_err(|e| PreprocessError::CorruptFile(format!("vocab json: {e}")))?;
    Ok(Vocab {
        feature_config: file.feature_config,
        limit: file.limit,
        token_ids: file.tokens,
    })
}

const EXAMPLES_MAGIC: &[u8; 5] = b"MEX01";

#[derive(Serialize, Deserialize)]
pub struct ExamplesHeader {
    pub version: u32,
    pub count: usize,
    pub feature_config: FeatureConfig,
    pub vocab_size: usize,
    pub max_tokens: usize,
}

fn write_u32(out: &mut impl Write, v: u32) -> std::io::Result<()> {
    out.write_all(&v.to_le_bytes())
}

fn write_tokens(out: &mut impl Write, item: &TokenizedItem) -> std::io::Result<()> {
    write_u32(out, item.token_ids.len() as u32)?;
    for &id in &item.token_ids {
        write_u32(out, id)?;
    }
    Ok(())
}

/// Writes prepared examples: magic, JSON header, then fixed-layout records.
pub fn write_examples(
    path: &Path,
    examples: &[SbrExample],
    header: &ExamplesHeader,
) -> Result<(), PreprocessError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(EXAMPLES_MAGIC)?;
    let manifest = serde_json::to_vec(header).expect("header serializes");
    out.write_all(&(manifest.len() as u64).to_le_bytes())?;
    out.write_all(&manifest)?;
    for example in examples {
        write_u32(&mut out, example.history.len() as u32)?;
        for item in &example.history {
            write_tokens(&mut out, item)?;
        }
        for target in &example.targets {
            write_tokens(&mut out, &target.tokens)?;
            write_u32(&mut out, target.item_id.len() as u32)?;
            out.write_all(target.item_id.as_bytes())?;
            out.write_all(&target.brand_id.to_le_bytes())?;
            out.write_all(&target.c2_id.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn u32(&mut self) -> Result<u32, PreprocessError> {
        let mut buf = [0u8; 4];
        self.inner.read_exact(&mut buf).map_err(truncated)?;
        Ok(u32::from_le_bytes(buf))
    }

    fn i64(&mut self) -> Result<i64, PreprocessError> {
        let mut buf = [0u8; 8];
        self.inner.read_exact(&mut buf).map_err(truncated)?;
        Ok(i64::from_le_bytes(buf))
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>, PreprocessError> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(truncated)?;
        Ok(buf)
    }

    fn tokens(&mut self, fc: FeatureConfig) -> Result<TokenizedItem, PreprocessError> {
        let n = self.u32()? as usize;
        if n > 1_000_000 {
            return Err(PreprocessError::CorruptFile(format!("token count {n} implausible")));
        }
        let mut token_ids = Vec::with_capacity(n);
        for _ in 0..n {
            token_ids.push(self.u32()?);
        }
        Ok(TokenizedItem {
            token_ids,
            feature_config: fc,
        })
    }
}

fn truncated(e: std::io::Error) -> PreprocessError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        PreprocessError::CorruptFile("truncated file".into())
    } else {
        PreprocessError::Io(e)
    }
}

pub fn read_examples(path: &Path) -> Result<(ExamplesHeader, Vec<SbrExample>), PreprocessError> {
    let file = std::fs::File::open(path)?;
    let mut r = Reader {
        inner: std::io::BufReader::new(file),
    };
    let magic = r.bytes(EXAMPLES_MAGIC.len())?;
    if magic != EXAMPLES_MAGIC {
        return Err(PreprocessError::CorruptFile("bad magic".into()));
    }
    let mut len_buf = [0u8; 8];
    r.inner.read_exact(&mut len_buf).map_err(truncated)?;
    let manifest = r.bytes(u64::from_le_bytes(len_buf) as usize)?;
    let header: ExamplesHeader = serde_json::from_slice(&manifest)
        .map_err(|e| PreprocessError::CorruptFile(format!("header json: {e}")))?;

    let mut examples = Vec::with_capacity(header.count);
    for _ in 0..header.count {
        let hist_len = r.u32()? as usize;
        if !(1..=MAX_HISTORY).contains(&hist_len) {
            return Err(PreprocessError::CorruptFile(format!(
                "history length {hist_len} outside 1..={MAX_HISTORY}"
            )));
        }
        let mut history = Vec::with_capacity(hist_len);
        for _ in 0..hist_len {
            history.push(r.tokens(header.feature_config)?);
        }
        let mut targets = Vec::with_capacity(TARGET_STEPS);
        for _ in 0..TARGET_STEPS {
            let tokens = r.tokens(header.feature_config)?;
            let id_len = r.u32()? as usize;
            let item_id = String::from_utf8(r.bytes(id_len)?)
                .map_err(|e| PreprocessError::CorruptFile(format!("item id not utf-8: {e}")))?;
            let brand_id = r.i64()?;
            let c2_id = r.i64()?;
            targets.push(TargetItem {
                tokens,
                item_id,
                brand_id,
                c2_id,
            });
        }
        examples.push(SbrExample { history, targets });
    }
    Ok((header, examples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{EventRecord, EventType};
    use proptest::prelude::*;

    fn item(id: &str, name: &str) -> ItemSnapshot {
        ItemSnapshot {
            item_id: id.to_string(),
            name: name.to_string(),
            price_usd: None,
            brand_id: Some(3),
            brand_name: "Nike".to_string(),
            c0_id: Some(0),
            c0_name: "Apparel".to_string(),
            c1_id: Some(1),
            c1_name: "Tops".to_string(),
            c2_id: Some(2),
            c2_name: "Shirts".to_string(),
            item_condition_id: None,
            size_id: None,
            shipper_id: None,
        }
    }

    fn event(etype: EventType, item_id: &str, t: i64) -> EventRecord {
        EventRecord {
            user_id: "u1".to_string(),
            sequence_id: "s1".to_string(),
            session_id: None,
            stime_micros: t,
            event_type: etype,
            item: item(item_id, "Red Shirt"),
        }
    }

    fn seq(events: Vec<EventRecord>) -> UserSequence {
        UserSequence {
            user_id: "u1".to_string(),
            sequence_id: "s1".to_string(),
            events,
        }
    }

    fn test_vocab() -> Vocab {
        let items = [item("i1", "Red Shirt"), item("i2", "Red Hat")];
        build_vocab(&items, FeatureConfig::TitleBrandCategory, 64).unwrap()
    }

    #[test]
    fn dedup_drops_consecutive_pairs() {
        let s = seq(vec![
            event(EventType::ItemView, "i1", 1),
            event(EventType::ItemView, "i1", 2),
            event(EventType::ItemLike, "i1", 3),
        ]);
        let d = dedup_consecutive(&s);
        assert_eq!(d.events.len(), 2);
        assert_eq!(d.events[0].event_type, EventType::ItemView);
        assert_eq!(d.events[1].event_type, EventType::ItemLike);
    }

    #[test]
    fn dedup_keeps_nonconsecutive_repeats() {
        let s = seq(vec![
            event(EventType::ItemView, "i1", 1),
            event(EventType::ItemView, "i2", 2),
            event(EventType::ItemView, "i1", 3),
        ]);
        assert_eq!(dedup_consecutive(&s).events.len(), 3);
    }

    #[test]
    fn dedup_empty() {
        assert!(dedup_consecutive(&seq(vec![])).events.is_empty());
    }

    #[test]
    fn segment_chunks_and_errors() {
        let s = seq((0..5).map(|t| event(EventType::ItemView, "i", t)).collect());
        let chunks = segment_sequence(&s, 2).unwrap();
        let lens: Vec<usize> = chunks.iter().map(|c| c.events.len()).collect();
        assert_eq!(lens, vec![2, 2, 1]);

        let one = segment_sequence(&seq(vec![event(EventType::ItemView, "i", 0), event(EventType::ItemLike, "i", 1)]), 10).unwrap();
        assert_eq!(one.len(), 1);

        assert!(matches!(segment_sequence(&s, 0), Err(PreprocessError::InvalidArg(_))));
    }

    #[test]
    fn window_boundaries() {
        let vocab = test_vocab();
        let mk = |n: usize| seq((0..n).map(|t| event(EventType::ItemView, &format!("i{t}"), t as i64)).collect());

        assert!(make_sbr_example(&mk(9), &vocab, 32).is_none());

        let ex10 = make_sbr_example(&mk(10), &vocab, 32).unwrap();
        assert_eq!(ex10.history.len(), 6);
        assert_eq!(ex10.targets.len(), 4);

        let ex40 = make_sbr_example(&mk(40), &vocab, 32).unwrap();
        assert_eq!(ex40.history.len(), 22);
        // Last 26 of 40 events: history covers indices 14..36, targets 36..40.
        assert_eq!(ex40.targets[0].item_id, "i36");
        assert_eq!(ex40.targets[3].item_id, "i39");
    }

    #[test]
    fn vocab_frequency_and_ties() {
        let items = [item("i1", "red shirt"), item("i2", "red hat")];
        let vocab = build_vocab(&items, FeatureConfig::TitleOnly, 10).unwrap();
        assert_eq!(vocab.id_of("red"), 3);
        assert_eq!(vocab.id_of("hat"), 4);
        assert_eq!(vocab.id_of("shirt"), 5);
        assert_eq!(vocab.id_of("nope"), UNK_ID);
    }

    #[test]
    fn vocab_empty_corpus_is_reserved_only() {
        let vocab = build_vocab(&[], FeatureConfig::TitleOnly, 100).unwrap();
        assert_eq!(vocab.size(), 3);
    }

    #[test]
    fn vocab_limit_keeps_top_frequency() {
        let items = [item("i1", "red shirt"), item("i2", "red hat")];
        let vocab = build_vocab(&items, FeatureConfig::TitleOnly, 4).unwrap();
        assert_eq!(vocab.size(), 4);
        assert!(vocab.contains("red"));
        assert!(!vocab.contains("hat"));
        assert!(!vocab.contains("shirt"));
    }

    #[test]
    fn tokenize_field_order_and_configs() {
        let items = [item("i1", "Red Shirt")];
        let it = &items[0];

        let full = build_vocab(&items, FeatureConfig::TitleBrandCategory, 64).unwrap();
        let toks = tokenize_item(it, &full, 32);
        let expect: Vec<u32> = ["red", "shirt", "nike", "apparel", "tops", "shirts"]
            .iter()
            .map(|t| full.id_of(t))
            .collect();
        assert_eq!(toks.token_ids, expect);
        assert!(toks.token_ids.iter().all(|&id| id >= 3));

        let title = build_vocab(&items, FeatureConfig::TitleOnly, 64).unwrap();
        let toks = tokenize_item(it, &title, 32);
        assert_eq!(toks.token_ids, vec![title.id_of("red"), title.id_of("shirt")]);
    }

    #[test]
    fn tokenize_oov_and_empty() {
        let vocab = build_vocab(&[item("i1", "alpha beta")], FeatureConfig::TitleOnly, 64).unwrap();
        let other = item("i2", "gamma delta");
        let toks = tokenize_item(&other, &vocab, 32);
        assert_eq!(toks.token_ids, vec![UNK_ID, UNK_ID]);

        let empty = item("i3", "—"); // punctuation only: no tokens
        let toks = tokenize_item(&empty, &vocab, 32);
        assert_eq!(toks.token_ids, vec![UNK_ID]);
    }

    #[test]
    fn tokenize_truncates_to_max_tokens() {
        let long = item("i1", "a b c d e f g h");
        let vocab = build_vocab(&[long.clone()], FeatureConfig::TitleOnly, 64).unwrap();
        assert_eq!(tokenize_item(&long, &vocab, 3).token_ids.len(), 3);
    }

    #[test]
    fn vocab_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = test_vocab();
        let path = dir.path().join("vocab.json");
        save_vocab(&vocab, &path).unwrap();
        let loaded = load_vocab(&path).unwrap();
        assert_eq!(loaded.size(), vocab.size());
        assert_eq!(loaded.feature_config, vocab.feature_config);
        assert_eq!(loaded.id_of("red"), vocab.id_of("red"));
    }

    #[test]
    fn examples_file_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = test_vocab();
        let s = seq((0..15).map(|t| event(EventType::ItemView, &format!("i{t}"), t as i64)).collect());
        let examples = prepare_examples(&[s], &vocab, None, 32).unwrap();
        assert_eq!(examples.len(), 1);

        let header = ExamplesHeader {
            version: 1,
            count: examples.len(),
            feature_config: vocab.feature_config,
            vocab_size: vocab.size(),
            max_tokens: 32,
        };
        let path = dir.path().join("examples.bin");
        write_examples(&path, &examples, &header).unwrap();
        let (h, back) = read_examples(&path).unwrap();
        assert_eq!(h.count, 1);
        assert_eq!(back, examples);

        let bytes = std::fs::read(&path).unwrap();
        let cut = path.with_extension("cut");
        std::fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(read_examples(&cut), Err(PreprocessError::CorruptFile(_))));
    }

    proptest! {
        #[test]
        fn dedup_is_idempotent_and_shrinking(
            pairs in proptest::collection::vec((0usize..3, 0usize..4), 0..60)
        ) {
            let types = [EventType::ItemView, EventType::ItemLike, EventType::BuyStart];
            let events: Vec<EventRecord> = pairs
                .iter()
                .enumerate()
                .map(|(i, &(t, it))| {
                    let mut e = event(types[t], &format!("i{it}"), i as i64);
                    e.item.item_id = format!("i{it}");
                    e
                })
                .collect();
            let s = seq(events);
            let once = dedup_consecutive(&s);
            let twice = dedup_consecutive(&once);
            prop_assert_eq!(&once, &twice);
            prop_assert!(once.events.len() <= s.events.len());
            for w in once.events.windows(2) {
                prop_assert!(
                    !(w[0].event_type == w[1].event_type && w[0].item.item_id == w[1].item.item_id)
                );
            }
        }

        #[test]
        fn segmentation_partitions(n in 0usize..80, max_len in 1usize..30) {
            let s = seq((0..n).map(|t| event(EventType::ItemView, &format!("i{t}"), t as i64)).collect());
            let chunks = segment_sequence(&s, max_len).unwrap();
            let concat: Vec<_> = chunks.iter().flat_map(|c| c.events.clone()).collect();
            prop_assert_eq!(concat, s.events);
            for (i, c) in chunks.iter().enumerate() {
                if i + 1 < chunks.len() {
                    prop_assert_eq!(c.events.len(), max_len);
                } else {
                    prop_assert!(c.events.len() <= max_len);
                }
            }
        }

        #[test]
        fn window_invariants_hold(n in 0usize..60) {
            let vocab = test_vocab();
            let s = seq((0..n).map(|t| event(EventType::ItemView, &format!("i{t}"), t as i64)).collect());
            match make_sbr_example(&s, &vocab, 32) {
                None => prop_assert!(n < MIN_SEQUENCE_EVENTS),
                Some(ex) => {
                    prop_assert!(n >= MIN_SEQUENCE_EVENTS);
                    prop_assert!((6..=MAX_HISTORY).contains(&ex.history.len()));
                    prop_assert_eq!(ex.targets.len(), TARGET_STEPS);
                }
            }
        }

        #[test]
        fn vocab_size_never_exceeds_limit(
            names in proptest::collection::vec("[a-c ]{0,12}", 0..20),
            limit in 4usize..40,
        ) {
            let items: Vec<ItemSnapshot> =
                names.iter().enumerate().map(|(i, n)| item(&format!("i{i}"), n)).collect();
            let vocab = build_vocab(&items, FeatureConfig::TitleOnly, limit).unwrap();
            prop_assert!(vocab.size() <= limit);
        }
    }
}
