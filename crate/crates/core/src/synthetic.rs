//! Planted-structure corpora and target tasks with known answers.
//!
//! Every target word owns a small set of context words drawn from a shared
//! pool, and each of its sentences is the target plus a few of those
//! context words. Masking the target leaves the context, so a sentence's
//! class is recoverable from the words around the mask.

use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedConfig {
    pub train_targets: usize,
    pub heldout_targets: usize,
    pub sentences_per_target: usize,
    pub context_pool: usize,
    pub context_per_target: usize,
    pub context_per_sentence: usize,
    pub seed: u64,
}

impl Default for PlantedConfig {
    /// 20 training targets with 10 sentences each: a 200-sentence training
    /// corpus, followed by 10 held-out targets.
    fn default() -> Self {
        Self {
            train_targets: 20,
            heldout_targets: 10,
            sentences_per_target: 10,
            context_pool: 60,
            context_per_target: 6,
            context_per_sentence: 4,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedCorpus {
    /// One sentence per line; training sentences first.
    pub lines: Vec<String>,
    /// Number of leading lines that belong to training targets.
    pub train_sentences: usize,
    pub train_targets: Vec<String>,
    pub heldout_targets: Vec<String>,
    /// Context words of every target, training targets first.
    pub contexts: Vec<Vec<String>>,
}

impl PlantedCorpus {
    pub fn text(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }

    pub fn train_text(&self) -> String {
        let mut s = self.lines[..self.train_sentences].join("\n");
        s.push('\n');
        s
    }
}

pub fn target_word(i: usize) -> String {
    format!("tgt{i:02}")
}

pub fn context_word(i: usize) -> String {
    format!("ctx{i:03}")
}

pub fn planted_corpus(cfg: &PlantedConfig) -> PlantedCorpus {
    assert!(cfg.context_per_sentence <= cfg.context_per_target && cfg.context_per_target <= cfg.context_pool);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_targets = cfg.train_targets + cfg.heldout_targets;
    let mut lines = Vec::with_capacity(n_targets * cfg.sentences_per_target);
    let mut contexts = Vec::with_capacity(n_targets);
    for t in 0..n_targets {
        let ctx: Vec<String> = index::sample(&mut rng, cfg.context_pool, cfg.context_per_target)
            .into_iter()
            .map(context_word)
            .collect();
        for _ in 0..cfg.sentences_per_target {
            let mut words: Vec<String> = index::sample(&mut rng, ctx.len(), cfg.context_per_sentence)
                .into_iter()
                .map(|i| ctx[i].clone())
                .collect();
            let at = rng.random_range(0..=words.len());
            words.insert(at, target_word(t));
            lines.push(words.join(" "));
        }
        contexts.push(ctx);
    }
    PlantedCorpus {
        lines,
        train_sentences: cfg.train_targets * cfg.sentences_per_target,
        train_targets: (0..cfg.train_targets).map(target_word).collect(),
        heldout_targets: (cfg.train_targets..n_targets).map(target_word).collect(),
        contexts,
    }
}

/// One labeled line of a synthetic target task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledLine {
    pub text: String,
    pub label: String,
    pub test: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicTaskConfig {
    pub classes: usize,
    pub topic_size: usize,
    pub words_per_sentence: usize,
    pub pool_per_class: usize,
    pub test_per_class: usize,
    pub context_pool: usize,
    pub seed: u64,
}

impl Default for TopicTaskConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            topic_size: 8,
            words_per_sentence: 5,
            pool_per_class: 40,
            test_per_class: 200,
            context_pool: 60,
            seed: 11,
        }
    }
}

/// Classification task whose classes use disjoint topic word sets drawn
/// from the context pool. All sentences are distinct, so pool and test
/// never share a sentence.
pub fn topic_task(cfg: &TopicTaskConfig) -> Vec<LabeledLine> {
    assert!(cfg.classes * cfg.topic_size <= cfg.context_pool);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ids: Vec<usize> = (0..cfg.context_pool).collect();
    ids.shuffle(&mut rng);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for c in 0..cfg.classes {
        let topic: Vec<String> = ids[c * cfg.topic_size..(c + 1) * cfg.topic_size]
            .iter()
            .map(|&i| context_word(i))
            .collect();
        let label = format!("class{c}");
        let mut made = 0;
        while made < cfg.pool_per_class + cfg.test_per_class {
            let words: Vec<&str> = index::sample(&mut rng, topic.len(), cfg.words_per_sentence)
                .into_iter()
                .map(|i| topic[i].as_str())
                .collect();
            let text = words.join(" ");
            if !seen.insert(text.clone()) {
                continue;
            }
            out.push(LabeledLine { text, label: label.clone(), test: made >= cfg.pool_per_class });
            made += 1;
        }
    }
    out
}

/// JSON Lines with `text` and `label`, plus `split` (`pool` or `test`)
/// when `with_split`.
pub fn to_jsonl(lines: &[LabeledLine], with_split: bool) -> String {
    let mut out = String::new();
    for l in lines {
        let rec = if with_split {
            serde_json::json!({ "text": l.text, "label": l.label, "split": if l.test { "test" } else { "pool" } })
        } else {
            serde_json::json!({ "text": l.text, "label": l.label })
        };
        out.push_str(&rec.to_string());
        out.push('\n');
    }
    out
}

/// Three-class labeled set for hybrid task mixing; every line is a
/// training example.
pub fn supervised_fixture() -> Vec<LabeledLine> {
    topic_task(&TopicTaskConfig {
        classes: 3,
        topic_size: 6,
        words_per_sentence: 4,
        pool_per_class: 30,
        test_per_class: 0,
        context_pool: 60,
        seed: 23,
    })
}

/// Bag-of-words feature vector over a fixed vocabulary.
pub fn bag_of_words(text: &str, vocab: &[String]) -> Vec<f64> {
    let mut v = vec![0.0; vocab.len()];
    for w in text.split_whitespace() {
        if let Some(i) = vocab.iter().position(|x| x == w) {
            v[i] += 1.0;
        }
    }
    v
}

/// Binary logistic regression by full-batch gradient descent; returns
/// weights with the bias last.
pub fn logistic_regression(x: &[Vec<f64>], y: &[bool], epochs: usize, lr: f64) -> Vec<f64> {
    let dim = x[0].len();
    let mut w = vec![0.0; dim + 1];
    for _ in 0..epochs {
        let mut g = vec![0.0; dim + 1];
        for (xi, &yi) in x.iter().zip(y) {
            let z: f64 = xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[dim];
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - if yi { 1.0 } else { 0.0 };
            for j in 0..dim {
                g[j] += err * xi[j];
            }
            g[dim] += err;
        }
        for (wj, gj) in w.iter_mut().zip(&g) {
            *wj -= lr * gj / x.len() as f64;
        }
    }
    w
}

pub fn logistic_predict(w: &[f64], x: &[f64]) -> bool {
    let dim = x.len();
    x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + w[dim] > 0.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_corpus_has_200_training_sentences() {
        let c = planted_corpus(&PlantedConfig::default());
        assert_eq!(c.train_sentences, 200);
        assert_eq!(c.lines.len(), 300);
        for (t, line) in c.lines.iter().enumerate() {
            let target = target_word(t / 10);
            let words: Vec<&str> = line.split(' ').collect();
            assert_eq!(words.len(), 5);
            assert_eq!(words.iter().filter(|w| **w == target).count(), 1);
            assert!(words.iter().filter(|w| **w != target).all(|w| c.contexts[t / 10].iter().any(|x| x == w)));
        }
    }

    #[test]
    fn topic_task_is_disjoint_and_balanced() {
        let lines = topic_task(&TopicTaskConfig::default());
        assert_eq!(lines.len(), 480);
        let unique: HashSet<&str> = lines.iter().map(|l| l.text.as_str()).collect();
        assert_eq!(unique.len(), lines.len());
        for c in ["class0", "class1"] {
            assert_eq!(lines.iter().filter(|l| l.label == c && l.test).count(), 200);
            assert_eq!(lines.iter().filter(|l| l.label == c && !l.test).count(), 40);
        }
    }

    #[test]
    fn topic_task_is_separable_by_a_linear_oracle() {
        let lines = topic_task(&TopicTaskConfig::default());
        let vocab: Vec<String> = (0..60).map(context_word).collect();
        let train: Vec<&LabeledLine> = lines.iter().filter(|l| !l.test).collect();
        let x: Vec<Vec<f64>> = train.iter().map(|l| bag_of_words(&l.text, &vocab)).collect();
        let y: Vec<bool> = train.iter().map(|l| l.label == "class1").collect();
        let w = logistic_regression(&x, &y, 200, 0.5);
        let test: Vec<&LabeledLine> = lines.iter().filter(|l| l.test).collect();
        let correct = test
            .iter()
            .filter(|l| logistic_predict(&w, &bag_of_words(&l.text, &vocab)) == (l.label == "class1"))
            .count();
        assert!(correct as f64 / test.len() as f64 >= 0.99);
    }
}
