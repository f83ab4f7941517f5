//! Corpus ingestion: sentence splitting, word-level tokenization, the token
//! table, and the inverted word → sentence index used for task sampling.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufRead, Write};
use std::ops::Range;

use thiserror::Error;

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const CLS_ID: TokenId = 2;
pub const MASK_ID: TokenId = 3;
const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[MASK]"];

const STORE_MAGIC: &str = "MFSTORE1";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid UTF-8 at byte offset {offset}")]
    InvalidUtf8 { offset: usize },
    #[error("corpus contains no sentences after filtering")]
    EmptyCorpus,
    #[error("no word reaches min_freq={min_freq} (max observed sentence frequency {max_freq})")]
    NoEligibleWords { min_freq: usize, max_freq: usize },
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("malformed file at line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// How raw text is split into sentences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    /// One sentence per line.
    Lines,
    /// Split after `.`, `!` or `?` when followed by whitespace and a capital.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineConfig {
    /// Token cap per sequence including the prepended CLS token.
    pub max_seq_len: usize,
    pub mode: SplitMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            max_seq_len: 32,
            mode: SplitMode::Lines,
        }
    }
}

/// Bidirectional word ↔ id map. Ids `0..4` are reserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenTable {
    words: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Default for TokenTable {
    fn default() -> Self {
        let mut table = Self {
            words: Vec::new(),
            ids: HashMap::new(),
        };
        for w in RESERVED {
            table.insert(w);
        }
        table
    }
}

impl TokenTable {
    fn insert(&mut self, word: &str) -> TokenId {
        if let Some(&id) = self.ids.get(word) {
            return id;
        }
        let id = self.words.len() as TokenId;
        self.words.push(word.to_string());
        self.ids.insert(word.to_string(), id);
        id
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.ids.get(word).copied()
    }

    /// Id for `word`, or [`UNK_ID`] when unseen.
    pub fn id_or_unk(&self, word: &str) -> TokenId {
        self.id(word).unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Total size including reserved ids.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn is_reserved(id: TokenId) -> bool {
        (id as usize) < RESERVED.len()
    }

    /// Tokenizes `text` against this table; unknown words map to [`UNK_ID`].
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text).into_iter().map(|w| self.id_or_unk(w)).collect()
    }
}

/// Word-level tokenization: whitespace separates tokens and every
/// non-alphanumeric character stands alone. Case is preserved.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            start.get_or_insert(i);
            continue;
        }
        if let Some(s) = start.take() {
            out.push(&text[s..i]);
        }
        if !c.is_whitespace() {
            out.push(&text[i..i + c.len_utf8()]);
        }
    }
    if let Some(s) = start {
        out.push(&text[s..]);
    }
    out
}

/// Rule-based sentence splitting for running text.
pub fn split_sentences_raw(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut begin = 0;
    for (pos, &(i, c)) in chars.iter().enumerate() {
        if !matches!(c, '.' | '!' | '?') {
            continue;
        }
        let mut j = pos + 1;
        while j < chars.len() && chars[j].1.is_whitespace() {
            j += 1;
        }
        if j > pos + 1 && j < chars.len() && chars[j].1.is_uppercase() {
            let end = i + c.len_utf8();
            out.push(&text[begin..end]);
            begin = chars[j].0;
        }
    }
    if begin < text.len() {
        out.push(&text[begin..]);
    }
    out
}

/// Immutable tokenized corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceStore {
    sentences: Vec<Vec<TokenId>>,
    table: TokenTable,
    max_seq_len: usize,
}

/// Splits, tokenizes and truncates `raw`, assigning word ids in order of
/// first appearance. Sentences keep at most `max_seq_len - 1` tokens so the
/// CLS token always fits.
pub fn ingest_corpus(raw: &[u8], cfg: &PipelineConfig) -> Result<SentenceStore, CorpusError> {
    if cfg.max_seq_len < 4 {
        return Err(CorpusError::InvalidConfig(format!(
            "max_seq_len must be >= 4, got {}",
            cfg.max_seq_len
        )));
    }
    let text = std::str::from_utf8(raw).map_err(|e| CorpusError::InvalidUtf8 {
        offset: e.valid_up_to(),
    })?;
    let pieces: Vec<&str> = match cfg.mode {
        SplitMode::Lines => text.lines().collect(),
        SplitMode::Raw => split_sentences_raw(text),
    };
    let mut table = TokenTable::default();
    let cap = cfg.max_seq_len - 1;
    let mut sentences = Vec::new();
    for piece in pieces {
        let ids: Vec<TokenId> = tokenize(piece)
            .into_iter()
            .take(cap)
            .map(|w| table.insert(w))
            .collect();
        if !ids.is_empty() {
            sentences.push(ids);
        }
    }
    if sentences.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok(SentenceStore {
        sentences,
        table,
        max_seq_len: cfg.max_seq_len,
    })
}

impl SentenceStore {
    pub fn sentences(&self) -> &[Vec<TokenId>] {
        &self.sentences
    }

    pub fn sentence(&self, i: usize) -> &[TokenId] {
        &self.sentences[i]
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn token_table(&self) -> &TokenTable {
        &self.table
    }

    pub fn vocab_size(&self) -> usize {
        self.table.len()
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    pub fn cls_id(&self) -> TokenId {
        CLS_ID
    }

    pub fn mask_id(&self) -> TokenId {
        MASK_ID
    }

    pub fn pad_id(&self) -> TokenId {
        PAD_ID
    }

    pub fn unk_id(&self) -> TokenId {
        UNK_ID
    }

    /// Tokenizes text for inference, truncated like ingested sentences.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut ids = self.table.encode(text);
        ids.truncate(self.max_seq_len - 1);
        ids
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{STORE_MAGIC}")?;
        writeln!(w, "max_seq_len\t{}", self.max_seq_len)?;
        writeln!(w, "tokens\t{}", self.table.len())?;
        for (id, word) in self.table.words.iter().enumerate() {
            writeln!(w, "{id}\t{word}")?;
        }
        writeln!(w, "sentences\t{}", self.sentences.len())?;
        for s in &self.sentences {
            let line: Vec<String> = s.iter().map(|t| t.to_string()).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, CorpusError> {
        let mut lines = r.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String), CorpusError> {
            match lines.next() {
                Some((i, line)) => Ok((i + 1, line?)),
                None => Err(CorpusError::Format {
                    line: 0,
                    msg: format!("unexpected end of file, expected {what}"),
                }),
            }
        };
        let bad = |line: usize, msg: String| CorpusError::Format { line, msg };
        let (ln, magic) = next("magic")?;
        if magic != STORE_MAGIC {
            return Err(bad(ln, format!("expected {STORE_MAGIC}, found {magic:?}")));
        }
        let header = |ln: usize, line: &str, key: &str| -> Result<usize, CorpusError> {
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix('\t'))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(ln, format!("expected `{key}\\t<n>`")))
        };
        let (ln, line) = next("max_seq_len")?;
        let max_seq_len = header(ln, &line, "max_seq_len")?;
        let (ln, line) = next("tokens")?;
        let n_tokens = header(ln, &line, "tokens")?;
        let mut table = TokenTable {
            words: Vec::with_capacity(n_tokens),
            ids: HashMap::with_capacity(n_tokens),
        };
        for expected in 0..n_tokens {
            let (ln, line) = next("token row")?;
            let (id, word) = line
                .split_once('\t')
                .ok_or_else(|| bad(ln, "expected `id\\tword`".into()))?;
            if id.parse::<usize>().ok() != Some(expected) || word.is_empty() {
                return Err(bad(ln, format!("expected token id {expected}")));
            }
            if table.ids.contains_key(word) {
                return Err(bad(ln, format!("duplicate word {word:?}")));
            }
            table.insert(word);
        }
        if table.words.len() < RESERVED.len()
            || table.words[..RESERVED.len()].iter().zip(RESERVED).any(|(a, b)| a != b)
        {
            return Err(bad(3, "reserved tokens missing".into()));
        }
        let (ln, line) = next("sentences")?;
        let n_sent = header(ln, &line, "sentences")?;
        let mut sentences = Vec::with_capacity(n_sent);
        for _ in 0..n_sent {
            let (ln, line) = next("sentence row")?;
            let ids = line
                .split(' ')
                .map(|t| t.parse::<TokenId>().ok().filter(|&id| (id as usize) < n_tokens))
                .collect::<Option<Vec<_>>>()
                .filter(|ids| !ids.is_empty() && ids.len() < max_seq_len)
                .ok_or_else(|| bad(ln, "invalid sentence row".into()))?;
            sentences.push(ids);
        }
        if sentences.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        Ok(Self {
            sentences,
            table,
            max_seq_len,
        })
    }
}

/// Inverted index over a [`SentenceStore`] plus the task-creation vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabIndex {
    min_freq: usize,
    eligible: Vec<TokenId>,
    postings: BTreeMap<TokenId, Vec<u32>>,
}

fn postings_for(store: &SentenceStore, sentences: impl Iterator<Item = usize>) -> BTreeMap<TokenId, Vec<u32>> {
    let mut postings: BTreeMap<TokenId, Vec<u32>> = BTreeMap::new();
    for i in sentences {
        for &t in &store.sentences[i] {
            let list = postings.entry(t).or_default();
            if list.last() != Some(&(i as u32)) {
                list.push(i as u32);
            }
        }
    }
    postings
}

/// Builds the index over every sentence of `store`.
pub fn build_index(store: &SentenceStore, min_freq: usize) -> Result<VocabIndex, CorpusError> {
    VocabIndex::from_postings(postings_for(store, 0..store.len()), min_freq)
}

/// Same result as [`build_index`], computed on `workers` threads over
/// contiguous shards whose postings are merged in shard order.
pub fn build_index_sharded(
    store: &SentenceStore,
    min_freq: usize,
    workers: usize,
) -> Result<VocabIndex, CorpusError> {
    let workers = workers.clamp(1, store.len().max(1));
    let chunk = store.len().div_ceil(workers);
    let shards: Vec<BTreeMap<TokenId, Vec<u32>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let range = (w * chunk).min(store.len())..((w + 1) * chunk).min(store.len());
                scope.spawn(move || postings_for(store, range))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("index shard panicked")).collect()
    });
    let mut merged: BTreeMap<TokenId, Vec<u32>> = BTreeMap::new();
    for shard in shards {
        for (t, list) in shard {
            merged.entry(t).or_default().extend(list);
        }
    }
    VocabIndex::from_postings(merged, min_freq)
}

/// Builds the index over a contiguous subset of sentences, e.g. to keep
/// training and held-out task pools apart within one store.
pub fn build_index_range(
    store: &SentenceStore,
    sentences: Range<usize>,
    min_freq: usize,
) -> Result<VocabIndex, CorpusError> {
    let end = sentences.end.min(store.len());
    VocabIndex::from_postings(postings_for(store, sentences.start..end), min_freq)
}

impl VocabIndex {
    fn from_postings(postings: BTreeMap<TokenId, Vec<u32>>, min_freq: usize) -> Result<Self, CorpusError> {
        if min_freq == 0 {
            return Err(CorpusError::InvalidConfig("min_freq must be positive".into()));
        }
        let eligible: Vec<TokenId> = postings
            .iter()
            .filter(|(&t, list)| !TokenTable::is_reserved(t) && list.len() >= min_freq)
            .map(|(&t, _)| t)
            .collect();
        if eligible.is_empty() {
            let max_freq = postings
                .iter()
                .filter(|(&t, _)| !TokenTable::is_reserved(t))
                .map(|(_, l)| l.len())
                .max()
                .unwrap_or(0);
            return Err(CorpusError::NoEligibleWords { min_freq, max_freq });
        }
        Ok(Self {
            min_freq,
            eligible,
            postings,
        })
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    /// Eligible task-creation words in ascending id order.
    pub fn eligible_words(&self) -> &[TokenId] {
        &self.eligible
    }

    /// Sorted sentence indices containing `word` (empty if absent).
    pub fn postings(&self, word: TokenId) -> &[u32] {
        self.postings.get(&word).map_or(&[], Vec::as_slice)
    }

    pub fn frequency(&self, word: TokenId) -> usize {
        self.postings(word).len()
    }

    pub fn contains(&self, word: TokenId, sentence: u32) -> bool {
        self.postings(word).binary_search(&sentence).is_ok()
    }

    /// TSV rows `word_id, frequency, comma-separated sentence ids`, preceded
    /// by a `#min_freq` header line.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "#min_freq\t{}", self.min_freq)?;
        for (t, list) in &self.postings {
            let ids: Vec<String> = list.iter().map(u32::to_string).collect();
            writeln!(w, "{t}\t{}\t{}", list.len(), ids.join(","))?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, CorpusError> {
        let mut min_freq = None;
        let mut postings = BTreeMap::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let ln = i + 1;
            let bad = |msg: &str| CorpusError::Format { line: ln, msg: msg.into() };
            if let Some(v) = line.strip_prefix("#min_freq\t") {
                min_freq = Some(v.parse().map_err(|_| bad("bad min_freq"))?);
                continue;
            }
            let mut cols = line.split('\t');
            let (Some(t), Some(f), Some(ids), None) = (cols.next(), cols.next(), cols.next(), cols.next()) else {
                return Err(bad("expected 3 tab-separated columns"));
            };
            let t: TokenId = t.parse().map_err(|_| bad("bad word id"))?;
            let f: usize = f.parse().map_err(|_| bad("bad frequency"))?;
            let list = ids
                .split(',')
                .map(|s| s.parse::<u32>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| bad("bad sentence id list"))?;
            if list.len() != f || list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(bad("postings must be strictly increasing and match the frequency"));
            }
            postings.insert(t, list);
        }
        let min_freq = min_freq.ok_or(CorpusError::Format {
            line: 1,
            msg: "missing #min_freq header".into(),
        })?;
        Self::from_postings(postings, min_freq)
    }
}
