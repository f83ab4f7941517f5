//! Evaluation protocol and analysis outputs against independent recomputation.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use smlmt_core::analysis::*;
use smlmt_core::corpus::{build_index, ingest_corpus, PipelineConfig, SentenceStore};
use smlmt_core::encoder::EncoderConfig;
use smlmt_core::eval::*;
use smlmt_core::meta::{write_log_header, write_log_row, MetaModel, MetaTrainConfig, MetaTrainer};
use smlmt_core::synthetic::{planted_corpus, to_jsonl, topic_task, PlantedConfig, TopicTaskConfig};
use smlmt_core::tasks::{QuerySize, SamplerConfig, SupportSize, TaskSampler};

fn store() -> SentenceStore {
    let corpus = planted_corpus(&PlantedConfig::default());
    ingest_corpus(corpus.text().as_bytes(), &PipelineConfig::default()).unwrap()
}

fn task(store: &SentenceStore, seed: u64) -> TargetTask {
    let cfg = TopicTaskConfig { test_per_class: 60, seed, ..Default::default() };
    parse_target_task(to_jsonl(&topic_task(&cfg), true).as_bytes(), &format!("topic{seed}"), store.token_table()).unwrap()
}

fn model(store: &SentenceStore, dim: usize, seed: u64) -> MetaModel {
    let cfg = EncoderConfig { vocab_size: store.vocab_size(), model_dim: dim, ff_dim: 2 * dim, n_layers: 2, n_heads: 2, max_seq_len: 32, dropout: 0.1 };
    MetaModel::new(cfg, 8, seed).unwrap()
}

#[test]
fn zero_epochs_scores_the_generated_head() {
    let s = store();
    let m = model(&s, 8, 0);
    let t = task(&s, 1);
    let ft = FinetuneConfig { epochs: 0, batch_size: 4, adapt_warp: false };
    let acc = finetune_and_test(&m, &t, 4, &ft, 0).unwrap();
    assert!((0.0..=1.0).contains(&acc));
    // No fine-tuning means the state is exactly the generated head.
    let state = finetune(&m, &t, 4, &ft, 0).unwrap();
    let (w, b) = m.generate_softmax(&t.draw_support(4, 0).unwrap(), 2).unwrap();
    assert_eq!((state.w(), state.b()), (&w, &b));
}

#[test]
fn report_has_one_row_per_task_k_and_draw() {
    let s = store();
    let m = model(&s, 8, 0);
    let tasks = [task(&s, 1), task(&s, 2)];
    let ft = FinetuneConfig { epochs: 1, batch_size: 8, adapt_warp: false };
    let ks = [4, 8, 16];
    let r = evaluate(&m, &tasks, &ks, 3, &ft, 10, 1).unwrap();
    assert_eq!(r.draws.len(), 2 * 3 * 3);
    assert_eq!(r.summaries.len(), 2 * 3);
    assert_eq!(r.seeds, draw_seeds(10, 3));
    let again = evaluate(&m, &tasks, &ks, 3, &ft, 10, 3).unwrap();
    assert_eq!(r, again);
    let mut csv = Vec::new();
    write_summary_csv(&mut csv, &[r]).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + 6);
}

#[test]
fn more_shots_help_on_average() {
    let s = store();
    let m = model(&s, 16, 3);
    let ft = FinetuneConfig { epochs: 10, batch_size: 4, adapt_warp: false };
    let tasks: Vec<TargetTask> = (0..5).map(|seed| task(&s, 100 + seed)).collect();
    let r = evaluate(&m, &tasks, &[4, 32], 3, &ft, 0, 1).unwrap();
    let mean = |k: usize| {
        let v: Vec<f64> = r.summaries.iter().filter(|x| x.k == k).map(|x| x.mean).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(32) >= mean(4), "k=32 {} < k=4 {}", mean(32), mean(4));
}

#[test]
fn grid_choice_matches_exhaustive_recomputation() {
    let s = store();
    let m = model(&s, 8, 1);
    let tasks = [task(&s, 1)];
    let g = grid_search(&m, &tasks, &[5, 0, 2], &[8, 4], 4, 2, 77, false, 1).unwrap();
    let mut best = (0, 0, f64::NEG_INFINITY);
    for e in [0, 2, 5] {
        for b in [4, 8] {
            let ft = FinetuneConfig { epochs: e, batch_size: b, adapt_warp: false };
            let accs: Vec<f64> = (0..2).map(|d| finetune_and_test(&m, &tasks[0], 4, &ft, 77 + d).unwrap()).collect();
            let mean = accs.iter().sum::<f64>() / 2.0;
            let cell = g.cells.iter().find(|c| c.0 == e && c.1 == b).unwrap();
            assert_eq!(cell.2, mean);
            if mean > best.2 {
                best = (e, b, mean);
            }
        }
    }
    assert_eq!((g.epochs, g.batch_size), (best.0, best.1));
}

#[test]
fn single_cell_and_ties() {
    let s = store();
    let mut m = model(&s, 8, 1);
    let tasks = [task(&s, 1)];
    let g = grid_search(&m, &tasks, &[3], &[8], 4, 1, 0, false, 1).unwrap();
    assert_eq!((g.epochs, g.batch_size, g.cells.len()), (3, 8, 1));
    // Zero step sizes make every cell identical; the smallest cell wins.
    for a in m.lrs.values_mut() {
        *a = 0.0;
    }
    let g = grid_search(&m, &tasks, &[10, 5], &[8, 4], 4, 2, 0, false, 1).unwrap();
    assert!(g.cells.windows(2).all(|w| w[0].2 == w[1].2));
    assert_eq!((g.epochs, g.batch_size), (5, 4));
}

fn training_log(steps: u64) -> Vec<u8> {
    let s = store();
    let corpus = planted_corpus(&PlantedConfig::default());
    let train = ingest_corpus(corpus.train_text().as_bytes(), &PipelineConfig::default()).unwrap();
    let index = build_index(&train, 10).unwrap();
    let scfg = SamplerConfig { lambda_mix: 1.0, support: SupportSize::PerClass(3), query: QuerySize::PerClass(3), ..Default::default() };
    let sampler = TaskSampler::new(&train, &index, &[], &scfg).unwrap();
    let mut trainer = MetaTrainer::new(model(&s, 8, 2));
    let cfg = MetaTrainConfig { episodes_per_epoch: steps * 4 - 1, ..Default::default() };
    let mut log = Vec::new();
    write_log_header(&mut log, trainer.model.lrs.groups()).unwrap();
    trainer.train(&sampler, &cfg, |r| write_log_row(&mut log, r)).unwrap();
    log
}

/// Second parser: header lookup by name, first row per step kept in a map.
fn parse_independently(log: &str) -> BTreeMap<(u64, String), f64> {
    let mut lines = log.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let mut out = BTreeMap::new();
    for line in lines {
        let row: BTreeMap<&str, &str> = header.iter().copied().zip(line.split(',')).collect();
        let step: u64 = row["step"].parse().unwrap();
        for (col, v) in &row {
            if let Some(g) = col.strip_prefix("alpha:") {
                out.entry((step, g.to_string())).or_insert(v.parse().unwrap());
            }
        }
    }
    out
}

#[test]
fn trajectories_match_a_second_parser() {
    let log = training_log(5);
    let t = lr_trajectories(log.as_slice()).unwrap();
    assert_eq!(t.steps, vec![0, 1, 2, 3, 4]);
    let oracle = parse_independently(std::str::from_utf8(&log).unwrap());
    assert_eq!(oracle.len(), t.steps.len() * t.groups.len());
    for (gi, g) in t.groups.iter().enumerate() {
        for (si, step) in t.steps.iter().enumerate() {
            assert_eq!(t.series[gi][si], oracle[&(*step, g.clone())]);
        }
    }
}

fn synthetic_log(values: impl Fn(usize, u64) -> f64, groups: usize, steps: u64) -> String {
    let mut s = String::from("step,val_loss");
    for g in 0..groups {
        s.push_str(&format!(",alpha:g{g}"));
    }
    s.push('\n');
    for t in 0..steps {
        s.push_str(&format!("{t},0.5"));
        for g in 0..groups {
            s.push_str(&format!(",{}", values(g, t)));
        }
        s.push('\n');
    }
    s
}

#[test]
fn constant_step_sizes_give_flat_series() {
    let t = lr_trajectories(synthetic_log(|_, _| 0.001, 3, 6).as_bytes()).unwrap();
    assert!(t.series.iter().all(|s| s.iter().all(|&v| v == 0.001)));
    assert!(!t.summary(DEFAULT_NEAR_ZERO, DEFAULT_OVERFIT_FRACTION).meta_overfitting);
}

#[test]
fn decayed_majority_raises_the_flag() {
    let decayed = |g: usize, t: u64| if g < 3 { 0.001 * 0.1f64.powi(t as i32) } else { 0.001 };
    let s = lr_trajectories(synthetic_log(decayed, 5, 8).as_bytes()).unwrap().summary(DEFAULT_NEAR_ZERO, DEFAULT_OVERFIT_FRACTION);
    assert!(s.meta_overfitting);
    assert_eq!(s.near_zero_fraction, 0.6);
    let half = |g: usize, t: u64| if g < 2 { 0.001 * 0.1f64.powi(t as i32) } else { 0.001 };
    let s = lr_trajectories(synthetic_log(half, 4, 8).as_bytes()).unwrap().summary(DEFAULT_NEAR_ZERO, 0.49);
    assert!(s.meta_overfitting);
}

#[test]
fn representations_have_one_row_per_input() {
    let s = store();
    let m = model(&s, 8, 4);
    let inputs: Vec<&[u32]> = vec![&[5, 6, 7], &[8, 9], &[5, 6, 7], &[10]];
    let reps = collect_reps(&m, &inputs, &[0, 1, 2], "t").unwrap();
    for (l, r) in reps.iter().enumerate() {
        assert_eq!((r.rows, r.cols, r.layer), (4, 8, l));
        assert_eq!(r.data[0..8], r.data[16..24], "identical inputs, identical rows");
    }
    assert_eq!(reps, collect_reps(&m, &inputs, &[0, 1, 2], "t").unwrap());
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> RepresentationMatrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut *rng)).collect();
    RepresentationMatrix::new(rows, cols, data, 0, "g").unwrap()
}

#[test]
fn independent_null_stays_below_its_monte_carlo_quantile() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut null: Vec<f64> = (0..200)
        .map(|_| cca_similarity(&gaussian(500, 16, &mut rng), &gaussian(500, 16, &mut rng), DEFAULT_CCA_REG).unwrap())
        .collect();
    null.sort_by(f64::total_cmp);
    let q99 = null[(0.99 * null.len() as f64) as usize];
    assert!(q99 < 0.35, "99th percentile {q99}");
    let fresh = cca_similarity(&gaussian(500, 16, &mut rng), &gaussian(500, 16, &mut rng), DEFAULT_CCA_REG).unwrap();
    assert!(fresh < 0.35);
}

#[test]
fn affine_invariance_over_random_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..10 {
        let a = gaussian(500, 16, &mut rng);
        let m = gaussian(16, 16, &mut rng);
        let data = (0..500 * 16)
            .map(|i| {
                let (r, c) = (i / 16, i % 16);
                (0..16).map(|j| a.data[r * 16 + j] * m.data[j * 16 + c]).sum::<f64>() + 1.0
            })
            .collect();
        let b = RepresentationMatrix::new(500, 16, data, 0, "b").unwrap();
        let v = cca_similarity(&a, &b, DEFAULT_CCA_REG).unwrap();
        assert!((v - 1.0).abs() < 1e-5, "{v}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cca_is_symmetric_and_bounded(seed in any::<u64>(), rows in 20usize..80, ca in 1usize..8, cb in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gaussian(rows, ca, &mut rng);
        let b = gaussian(rows, cb, &mut rng);
        let ab = cca_similarity(&a, &b, DEFAULT_CCA_REG).unwrap();
        let ba = cca_similarity(&b, &a, DEFAULT_CCA_REG).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - ba).abs() < 1e-8);
    }
}
