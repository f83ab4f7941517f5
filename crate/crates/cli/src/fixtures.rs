//! Bundled fixtures, generated from `smlmt_core::synthetic`. The topic
//! task in `fixtures/topic.jsonl` is read from disk by `evaluate --task`.

/// 200-sentence planted corpus: 20 target words, 10 sentences each.
pub const PLANTED: &str = include_str!("../fixtures/planted.txt");
/// Three-class labeled set for hybrid sampling.
pub const SUPERVISED: &str = include_str!("../fixtures/supervised.jsonl");
