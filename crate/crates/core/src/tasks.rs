//! Episode sampling: subset-masked language modeling tasks built from raw
//! sentences, supervised tasks built from labeled files, and the Bernoulli
//! mixture of the two.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{SentenceStore, TokenId, TokenTable, VocabIndex};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("target word {target} does not occur in the sentence")]
    TargetAbsent { target: TokenId },
    #[error("could not sample a feasible task after {attempts} attempts: {reason}")]
    Infeasible { attempts: usize, reason: String },
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("{path}:{line}: {msg}")]
    Malformed { path: String, line: usize, msg: String },
    #[error("task set {name:?} has fewer than two usable classes")]
    NoUsableClasses { name: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Where an episode came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Provenance {
    Smlmt,
    Supervised(String),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Smlmt => f.write_str("smlmt"),
            Provenance::Supervised(name) => write!(f, "supervised:{name}"),
        }
    }
}

impl std::str::FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "smlmt" => Ok(Provenance::Smlmt),
            _ => s
                .strip_prefix("supervised:")
                .map(|n| Provenance::Supervised(n.to_string()))
                .ok_or_else(|| format!("unknown provenance {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<TokenId>,
    pub label: usize,
    /// Sentence index (SMLMT) or example index within its class
    /// (supervised). Debug only.
    #[serde(skip)]
    pub source: Option<u32>,
}

/// One N-way k-shot task instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub n_way: usize,
    pub k_support: usize,
    pub q_query: usize,
    /// Grouped by label, `k_support` examples per label.
    pub support: Vec<Example>,
    /// Grouped by label, `q_query` examples per label.
    pub query: Vec<Example>,
    pub provenance: Provenance,
    /// The masked word behind each label (SMLMT only). Never model-visible.
    pub secret_words: Option<Vec<TokenId>>,
}

impl Episode {
    /// Support sequences of class `label`.
    pub fn support_of(&self, label: usize) -> impl Iterator<Item = &Example> {
        self.support.iter().filter(move |e| e.label == label)
    }

    /// Checks every structural invariant; returns a description of the first
    /// violation.
    pub fn check_invariants(&self, mask_id: TokenId) -> Result<(), String> {
        if self.n_way < 2 {
            return Err(format!("n_way {} < 2", self.n_way));
        }
        for (set, per, name) in [(&self.support, self.k_support, "support"), (&self.query, self.q_query, "query")] {
            let mut counts = vec![0usize; self.n_way];
            for e in set.iter() {
                if e.label >= self.n_way {
                    return Err(format!("{name} label {} out of range", e.label));
                }
                if e.tokens.is_empty() {
                    return Err(format!("{name} has an empty sequence"));
                }
                counts[e.label] += 1;
            }
            if counts.iter().any(|&c| c != per) {
                return Err(format!("{name} class counts {counts:?}, expected {per} each"));
            }
        }
        if self.provenance == Provenance::Smlmt {
            let secrets = self.secret_words.as_ref().ok_or("smlmt episode without secret words")?;
            if secrets.len() != self.n_way {
                return Err("secret word count differs from n_way".into());
            }
            for e in self.support.iter().chain(&self.query) {
                if !e.tokens.contains(&mask_id) {
                    return Err("smlmt sequence without a mask token".into());
                }
                if let Some(w) = e.tokens.iter().find(|t| secrets.contains(t)) {
                    return Err(format!("secret word {w} leaks unmasked"));
                }
            }
        }
        for label in 0..self.n_way {
            let mut sources: Vec<u32> = self
                .support
                .iter()
                .chain(&self.query)
                .filter(|e| e.label == label)
                .filter_map(|e| e.source)
                .collect();
            let n = sources.len();
            sources.sort_unstable();
            sources.dedup();
            if sources.len() != n {
                return Err(format!("class {label} reuses a source example"));
            }
        }
        Ok(())
    }

    /// One JSON line; `secret_words` is emitted only when `debug` is set.
    pub fn to_json(&self, debug: bool) -> String {
        let record = EpisodeRecord {
            n_way: self.n_way,
            k: self.k_support,
            q: self.q_query,
            provenance: self.provenance.to_string(),
            support: self.support.clone(),
            query: self.query.clone(),
            secret_words: if debug { self.secret_words.clone() } else { None },
        };
        serde_json::to_string(&record).expect("episode serialization cannot fail")
    }

    pub fn from_json(line: &str) -> Result<Self, String> {
        let r: EpisodeRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        Ok(Self {
            n_way: r.n_way,
            k_support: r.k,
            q_query: r.q,
            support: r.support,
            query: r.query,
            provenance: r.provenance.parse()?,
            secret_words: r.secret_words,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct EpisodeRecord {
    n_way: usize,
    k: usize,
    q: usize,
    provenance: String,
    support: Vec<Example>,
    query: Vec<Example>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    secret_words: Option<Vec<TokenId>>,
}

/// Support examples per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupportSize {
    /// Fixed `k` per class.
    PerClass(usize),
    /// A per-task budget split evenly: `k = floor(budget / N)`.
    Budget(usize),
}

/// Query examples per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySize {
    PerClass(usize),
    /// Per-task total split evenly, at least one per class.
    PerTask(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Probability of an SMLMT episode in the hybrid stream. `1.0` disables
    /// supervised tasks.
    pub lambda_mix: f64,
    pub n_way_choices: Vec<usize>,
    pub support: SupportSize,
    pub query: QuerySize,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            lambda_mix: 0.5,
            n_way_choices: vec![2, 3, 4],
            support: SupportSize::Budget(80),
            query: QuerySize::PerClass(10),
            max_retries: 10,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), TaskError> {
        if !(self.lambda_mix > 0.0 && self.lambda_mix <= 1.0) {
            return Err(TaskError::Config(format!("lambda must lie in (0, 1], got {}", self.lambda_mix)));
        }
        if self.n_way_choices.is_empty() || self.n_way_choices.iter().any(|&n| n < 2) {
            return Err(TaskError::Config("n_way choices must be non-empty and >= 2".into()));
        }
        for &n in &self.n_way_choices {
            if self.k_for(n) == 0 {
                return Err(TaskError::Config(format!("support size is zero for N={n}")));
            }
            if self.q_for(n) == 0 {
                return Err(TaskError::Config("query size must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn k_for(&self, n_way: usize) -> usize {
        match self.support {
            SupportSize::PerClass(k) => k,
            SupportSize::Budget(b) => b / n_way,
        }
    }

    pub fn q_for(&self, n_way: usize) -> usize {
        match self.query {
            QuerySize::PerClass(q) => q,
            QuerySize::PerTask(t) => (t / n_way).max(1),
        }
    }

    /// Largest k + q any episode can request from one class.
    pub fn max_class_demand(&self) -> usize {
        let top = self.n_way_choices.iter().copied().max().unwrap_or(2);
        (2..=top).map(|n| self.k_for(n) + self.q_for(n)).max().unwrap_or(0)
    }

    fn pick_n_way<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.n_way_choices[rng.random_range(0..self.n_way_choices.len())]
    }
}

/// Deterministic per-episode generator: episode `i` of a run seeded with
/// `seed` always draws from the same independent stream.
pub fn episode_rng(seed: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode);
    rng
}

/// Replaces every occurrence of `target` with `mask_id`.
pub fn mask_sentence(sentence: &[TokenId], target: TokenId, mask_id: TokenId) -> Result<Vec<TokenId>, TaskError> {
    if !sentence.contains(&target) {
        return Err(TaskError::TargetAbsent { target });
    }
    Ok(sentence.iter().map(|&t| if t == target { mask_id } else { t }).collect())
}

/// Assigns classes to shuffled labels and splits each class's examples into
/// support (first `k`) and query (next `q`).
fn assemble<R: Rng + ?Sized>(
    classes: Vec<Vec<(Vec<TokenId>, u32)>>,
    k: usize,
    q: usize,
    rng: &mut R,
) -> (Vec<Example>, Vec<Example>) {
    let n = classes.len();
    let mut labels: Vec<usize> = (0..n).collect();
    labels.shuffle(rng);
    let mut by_label: Vec<Vec<(Vec<TokenId>, u32)>> = vec![Vec::new(); n];
    for (class, members) in classes.into_iter().enumerate() {
        by_label[labels[class]] = members;
    }
    let mut support = Vec::with_capacity(n * k);
    let mut query = Vec::with_capacity(n * q);
    for (label, members) in by_label.into_iter().enumerate() {
        for (i, (tokens, source)) in members.into_iter().enumerate() {
            let ex = Example { tokens, label, source: Some(source) };
            if i < k {
                support.push(ex);
            } else {
                query.push(ex);
            }
        }
    }
    (support, query)
}

/// Builds an SMLMT episode from a fixed word subset. Sentences containing
/// any other chosen word are excluded. Returns `None` when some word has
/// fewer than `k + q` usable sentences.
pub fn smlmt_from_words<R: Rng + ?Sized>(
    words: &[TokenId],
    index: &VocabIndex,
    store: &SentenceStore,
    k: usize,
    q: usize,
    rng: &mut R,
) -> Option<Episode> {
    let r = k + q;
    let mut classes = Vec::with_capacity(words.len());
    for &w in words {
        let usable: Vec<u32> = index
            .postings(w)
            .iter()
            .copied()
            .filter(|&s| words.iter().all(|&o| o == w || !index.contains(o, s)))
            .collect();
        if usable.len() < r {
            return None;
        }
        let mut picked: Vec<u32> = index::sample(rng, usable.len(), r).into_iter().map(|i| usable[i]).collect();
        picked.shuffle(rng);
        let members = picked
            .into_iter()
            .map(|s| {
                let masked = mask_sentence(store.sentence(s as usize), w, store.mask_id())
                    .expect("postings guarantee the target occurs");
                (masked, s)
            })
            .collect();
        classes.push(members);
    }
    let (support, query) = assemble(classes, k, q, rng);
    Some(Episode {
        n_way: words.len(),
        k_support: k,
        q_query: q,
        support,
        query,
        provenance: Provenance::Smlmt,
        secret_words: Some(words.to_vec()),
    })
}

/// Samples one SMLMT episode: N words uniformly without replacement, then
/// `k + q` sentences per word. Infeasible word subsets are redrawn up to
/// `cfg.max_retries` times.
pub fn sample_smlmt<R: Rng + ?Sized>(
    index: &VocabIndex,
    store: &SentenceStore,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Episode, TaskError> {
    let eligible = index.eligible_words();
    let attempts = cfg.max_retries + 1;
    let mut reason = String::new();
    for _ in 0..attempts {
        let n = cfg.pick_n_way(rng);
        if eligible.len() < n {
            reason = format!("{} eligible words for N={n}", eligible.len());
            continue;
        }
        let words: Vec<TokenId> = index::sample(rng, eligible.len(), n).into_iter().map(|i| eligible[i]).collect();
        let (k, q) = (cfg.k_for(n), cfg.q_for(n));
        match smlmt_from_words(&words, index, store, k, q, rng) {
            Some(ep) => return Ok(ep),
            None => reason = format!("a word in {words:?} has fewer than {} usable sentences", k + q),
        }
    }
    Err(TaskError::Infeasible { attempts, reason })
}

/// Labeled task loaded from JSON Lines.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedTaskSet {
    pub name: String,
    pub examples_by_class: BTreeMap<String, Vec<Vec<TokenId>>>,
    /// Square root of the usable example count, normalized across sets.
    pub sample_weight: f64,
}

impl SupervisedTaskSet {
    pub fn total_examples(&self) -> usize {
        self.examples_by_class.values().map(Vec::len).sum()
    }
}

#[derive(Deserialize)]
struct LabeledLine {
    text: String,
    label: String,
}

/// Parses `{"text", "label"}` lines. Classes with fewer than
/// `min_per_class` examples are dropped with a warning.
pub fn parse_supervised<R: BufRead>(
    reader: R,
    name: &str,
    table: &TokenTable,
    min_per_class: usize,
) -> Result<SupervisedTaskSet, TaskError> {
    let mut classes: BTreeMap<String, Vec<Vec<TokenId>>> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabeledLine = serde_json::from_str(&line).map_err(|e| TaskError::Malformed {
            path: name.to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        classes.entry(rec.label).or_default().push(table.encode(&rec.text));
    }
    classes.retain(|label, examples| {
        let keep = examples.len() >= min_per_class;
        if !keep {
            log::warn!(
                "{name}: class {label:?} has {} examples (< {min_per_class}); excluded",
                examples.len()
            );
        }
        keep
    });
    if classes.len() < 2 {
        return Err(TaskError::NoUsableClasses { name: name.to_string() });
    }
    let total: usize = classes.values().map(Vec::len).sum();
    Ok(SupervisedTaskSet {
        name: name.to_string(),
        examples_by_class: classes,
        sample_weight: (total as f64).sqrt(),
    })
}

/// Loads a supervised task file named after its stem. Weights are left
/// unnormalized; call [`normalize_weights`] once all sets are loaded.
pub fn load_supervised(path: &Path, table: &TokenTable, cfg: &SamplerConfig) -> Result<SupervisedTaskSet, TaskError> {
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("task").to_string();
    let file = std::fs::File::open(path)?;
    parse_supervised(io::BufReader::new(file), &name, table, cfg.max_class_demand()).map_err(|e| match e {
        TaskError::Malformed { line, msg, .. } => TaskError::Malformed {
            path: path.display().to_string(),
            line,
            msg,
        },
        other => other,
    })
}

/// Rescales weights to sum to one.
pub fn normalize_weights(sets: &mut [SupervisedTaskSet]) {
    let total: f64 = sets.iter().map(|s| s.sample_weight).sum();
    if total > 0.0 {
        for s in sets.iter_mut() {
            s.sample_weight /= total;
        }
    }
}

/// Samples a supervised episode: a task set in proportion to its weight,
/// then `N = min(L, n)` classes and `k + q` examples of each.
pub fn sample_supervised<R: Rng + ?Sized>(
    tasks: &[SupervisedTaskSet],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Episode, TaskError> {
    if tasks.is_empty() {
        return Err(TaskError::Config("no supervised task sets loaded".into()));
    }
    let weights = WeightedIndex::new(tasks.iter().map(|t| t.sample_weight))
        .map_err(|e| TaskError::Config(format!("invalid task weights: {e}")))?;
    let set = &tasks[weights.sample(rng)];
    let labels: Vec<&String> = set.examples_by_class.keys().collect();
    let n = cfg.pick_n_way(rng).min(labels.len());
    let (k, q) = (cfg.k_for(n), cfg.q_for(n));
    let mut classes = Vec::with_capacity(n);
    for ci in index::sample(rng, labels.len(), n) {
        let pool = &set.examples_by_class[labels[ci]];
        if pool.len() < k + q {
            return Err(TaskError::Infeasible {
                attempts: 1,
                reason: format!("class {:?} of {} has {} < {} examples", labels[ci], set.name, pool.len(), k + q),
            });
        }
        let mut picked: Vec<usize> = index::sample(rng, pool.len(), k + q).into_vec();
        picked.shuffle(rng);
        classes.push(picked.into_iter().map(|i| (pool[i].clone(), i as u32)).collect());
    }
    let (support, query) = assemble(classes, k, q, rng);
    Ok(Episode {
        n_way: n,
        k_support: k,
        q_query: q,
        support,
        query,
        provenance: Provenance::Supervised(set.name.clone()),
        secret_words: None,
    })
}

/// Draws an SMLMT episode with probability `lambda_mix`, otherwise a
/// supervised one.
pub fn sample_hybrid<R: Rng + ?Sized>(
    index: &VocabIndex,
    store: &SentenceStore,
    tasks: &[SupervisedTaskSet],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Episode, TaskError> {
    if cfg.lambda_mix < 1.0 && tasks.is_empty() {
        return Err(TaskError::Config(format!(
            "lambda={} requires supervised tasks but none are loaded",
            cfg.lambda_mix
        )));
    }
    if rng.random::<f64>() < cfg.lambda_mix {
        sample_smlmt(index, store, cfg, rng)
    } else {
        sample_supervised(tasks, cfg, rng)
    }
}

/// Episode stream over fixed task sources.
#[derive(Clone, Copy)]
pub struct TaskSampler<'a> {
    pub store: &'a SentenceStore,
    pub index: &'a VocabIndex,
    pub tasks: &'a [SupervisedTaskSet],
    pub cfg: &'a SamplerConfig,
}

impl<'a> TaskSampler<'a> {
    pub fn new(
        store: &'a SentenceStore,
        index: &'a VocabIndex,
        tasks: &'a [SupervisedTaskSet],
        cfg: &'a SamplerConfig,
    ) -> Result<Self, TaskError> {
        cfg.validate()?;
        if cfg.lambda_mix < 1.0 && tasks.is_empty() {
            return Err(TaskError::Config(format!(
                "lambda={} requires supervised tasks but none are loaded",
                cfg.lambda_mix
            )));
        }
        Ok(Self { store, index, tasks, cfg })
    }

    /// Episode number `i` of the stream; a pure function of `(cfg, i)`.
    pub fn episode(&self, i: u64) -> Result<Episode, TaskError> {
        let mut rng = episode_rng(self.cfg.seed, i);
        sample_hybrid(self.index, self.store, self.tasks, self.cfg, &mut rng)
    }

    /// Episodes `0..count`, generated on `workers` threads over disjoint
    /// index ranges. Output is identical for every worker count.
    pub fn generate(&self, count: u64, workers: usize) -> Vec<Result<Episode, TaskError>> {
        let workers = workers.max(1) as u64;
        if workers == 1 || count < 2 {
            return (0..count).map(|i| self.episode(i)).collect();
        }
        let chunk = count.div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let range = (w * chunk).min(count)..((w + 1) * chunk).min(count);
                    scope.spawn(move || range.map(|i| self.episode(i)).collect::<Vec<_>>())
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("generator thread panicked")).collect()
        })
    }
}

/// Writes episodes as JSON Lines.
pub fn write_episodes<'e, W: Write>(
    mut w: W,
    episodes: impl IntoIterator<Item = &'e Episode>,
    debug_secrets: bool,
) -> io::Result<()> {
    for ep in episodes {
        writeln!(w, "{}", ep.to_json(debug_secrets))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_index, ingest_corpus, PipelineConfig, MASK_ID};

    const M: TokenId = MASK_ID;

    #[test]
    fn mask_replaces_every_occurrence() {
        let (the, cat, sat, on, mat) = (10, 11, 12, 13, 14);
        let out = mask_sentence(&[the, cat, sat, on, the, cat, mat], cat, M).unwrap();
        assert_eq!(out, vec![the, M, sat, on, the, M, mat]);
    }

    #[test]
    fn mask_single_token_sentence() {
        assert_eq!(mask_sentence(&[7], 7, M).unwrap(), vec![M]);
    }

    #[test]
    fn mask_absent_target_is_an_error() {
        assert!(matches!(mask_sentence(&[1, 2], 9, M), Err(TaskError::TargetAbsent { target: 9 })));
    }

    fn toy() -> (SentenceStore, VocabIndex) {
        let text = "cat sat here\nthe cat ran\na cat slept\ndog barked loud\nthe dog ran\nmy dog slept\n";
        let store = ingest_corpus(text.as_bytes(), &PipelineConfig::default()).unwrap();
        let index = build_index(&store, 3).unwrap();
        (store, index)
    }

    #[test]
    fn toy_episode_shape() {
        let (store, index) = toy();
        let cfg = SamplerConfig {
            n_way_choices: vec![2],
            support: SupportSize::PerClass(2),
            query: QuerySize::PerClass(1),
            ..Default::default()
        };
        let mut rng = episode_rng(1, 0);
        let ep = sample_smlmt(&index, &store, &cfg, &mut rng).unwrap();
        assert_eq!(ep.support.len(), 4);
        assert_eq!(ep.query.len(), 2);
        ep.check_invariants(M).unwrap();
    }

    #[test]
    fn infeasible_requests_fail_after_retries() {
        let (store, index) = toy();
        let cfg = SamplerConfig {
            n_way_choices: vec![2],
            support: SupportSize::PerClass(3),
            query: QuerySize::PerClass(1),
            max_retries: 4,
            ..Default::default()
        };
        let err = sample_smlmt(&index, &store, &cfg, &mut episode_rng(0, 0)).unwrap_err();
        assert!(matches!(err, TaskError::Infeasible { attempts: 5, .. }));
    }

    #[test]
    fn hybrid_without_supervised_tasks_is_a_config_error() {
        let (store, index) = toy();
        let cfg = SamplerConfig { lambda_mix: 0.5, ..Default::default() };
        let err = sample_hybrid(&index, &store, &[], &cfg, &mut episode_rng(0, 0)).unwrap_err();
        assert!(matches!(err, TaskError::Config(_)));
    }

    #[test]
    fn default_config_matches_published_hyperparameters() {
        let cfg = SamplerConfig::default();
        assert_eq!(cfg.lambda_mix, 0.5);
        assert_eq!(cfg.n_way_choices, vec![2, 3, 4]);
        assert_eq!(cfg.k_for(4), 20);
        assert_eq!(cfg.k_for(3), 26);
        assert_eq!(cfg.q_for(3), 10);
    }

    #[test]
    fn supervised_parse_groups_classes_and_weights() {
        let store = ingest_corpus(b"good bad movie", &PipelineConfig::default()).unwrap();
        let mut lines = String::new();
        for i in 0..20 {
            for label in ["pos", "neg", "mid"] {
                lines.push_str(&format!("{{\"text\": \"good movie {i}\", \"label\": \"{label}\"}}\n"));
            }
        }
        let set = parse_supervised(lines.as_bytes(), "toy", store.token_table(), 5).unwrap();
        assert_eq!(set.examples_by_class.len(), 3);
        assert!(set.examples_by_class.values().all(|v| v.len() == 20));
        // Unknown numerals map to UNK.
        assert!(set.examples_by_class["pos"][0].contains(&crate::corpus::UNK_ID));
        assert!((set.sample_weight - 60f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn square_root_weights_normalize() {
        let mk = |n: usize| SupervisedTaskSet {
            name: format!("t{n}"),
            examples_by_class: BTreeMap::new(),
            sample_weight: (n as f64).sqrt(),
        };
        let mut sets = vec![mk(100), mk(400)];
        normalize_weights(&mut sets);
        assert!((sets[0].sample_weight - 1.0 / 3.0).abs() < 1e-12);
        assert!((sets[1].sample_weight - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let table = TokenTable::default();
        let input = "{\"text\": \"a\", \"label\": \"x\"}\nnot json\n";
        match parse_supervised(input.as_bytes(), "bad", &table, 1) {
            Err(TaskError::Malformed { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn small_classes_are_excluded_and_too_few_classes_error() {
        let table = TokenTable::default();
        let mut input = String::new();
        for _ in 0..5 {
            input.push_str("{\"text\": \"a\", \"label\": \"big\"}\n");
        }
        input.push_str("{\"text\": \"a\", \"label\": \"tiny\"}\n");
        assert!(matches!(
            parse_supervised(input.as_bytes(), "t", &table, 3),
            Err(TaskError::NoUsableClasses { .. })
        ));
    }

    #[test]
    fn episode_json_hides_secrets_unless_debug() {
        let (store, index) = toy();
        let cfg = SamplerConfig {
            n_way_choices: vec![2],
            support: SupportSize::PerClass(1),
            query: QuerySize::PerClass(1),
            ..Default::default()
        };
        let ep = sample_smlmt(&index, &store, &cfg, &mut episode_rng(3, 0)).unwrap();
        let plain = ep.to_json(false);
        assert!(!plain.contains("secret_words"));
        assert!(plain.starts_with("{\"n_way\":2,\"k\":1,\"q\":1,\"provenance\":\"smlmt\",\"support\":[{\"tokens\":"));
        let debug = ep.to_json(true);
        let back = Episode::from_json(&debug).unwrap();
        assert_eq!(back.secret_words, ep.secret_words);
        assert_eq!(back.support.len(), ep.support.len());
    }
}
